//! Fréchet distance between Gaussian fits of handcrafted slice features,
//! evaluated separately over axial, sagittal and coronal slices.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volgrid::Grid;

use super::linalg::{jacobi_eigen, Matrix};

pub const FEATURE_DIM: usize = 14;
const HIST_BINS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Fixed last axis.
    Axial,
    /// Fixed first axis.
    Sagittal,
    /// Fixed middle axis.
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Sagittal, View::Coronal];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
        }
    }
}

/// A 2-D slice in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Slice {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// All slices of a `[X, Y, Z]` grid for `view`.
pub fn slices(v: &Grid, view: View) -> Result<Vec<Slice>> {
    let [nx, ny, nz] = match v.shape() {
        [a, b, c] => [*a, *b, *c],
        s => return Err(Error::shape("slices", format!("expected [X, Y, Z], got {s:?}"))),
    };
    let d = v.data();
    let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    let out = match view {
        View::Axial => (0..nz)
            .map(|z| Slice {
                rows: nx,
                cols: ny,
                data: (0..nx).flat_map(|x| (0..ny).map(move |y| (x, y))).map(|(x, y)| d[idx(x, y, z)]).collect(),
            })
            .collect(),
        View::Sagittal => (0..nx)
            .map(|x| Slice {
                rows: ny,
                cols: nz,
                data: d[idx(x, 0, 0)..idx(x, 0, 0) + ny * nz].to_vec(),
            })
            .collect(),
        View::Coronal => (0..ny)
            .map(|y| Slice {
                rows: nx,
                cols: nz,
                data: (0..nx).flat_map(|x| (0..nz).map(move |z| (x, z))).map(|(x, z)| d[idx(x, y, z)]).collect(),
            })
            .collect(),
    };
    Ok(out)
}

/// Central differences in the interior, one-sided at the edges; zero along
/// an axis of extent 1.
fn gradient_1d(get: impl Fn(usize) -> f64, n: usize, i: usize) -> f64 {
    if n < 2 {
        0.0
    } else if i == 0 {
        get(1) - get(0)
    } else if i == n - 1 {
        get(n - 1) - get(n - 2)
    } else {
        (get(i + 1) - get(i - 1)) / 2.0
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// 14 statistics of one slice: mean, std, skewness, excess kurtosis,
/// gradient-magnitude mean and std, and an 8-bin histogram over `[0, 1]`.
pub fn slice_feature(s: &Slice) -> [f64; FEATURE_DIM] {
    let v = &s.data;
    let n = v.len() as f64;
    let (mean, std) = mean_std(v);
    let constant = v.iter().all(|&x| x == v[0]);
    let (skew, kurt) = if constant {
        (0.0, 0.0)
    } else {
        let m2 = std * std;
        let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
        let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    };
    let (mean, std) = if constant { (v[0], 0.0) } else { (mean, std) };
    let mut gmag = Vec::with_capacity(v.len());
    for r in 0..s.rows {
        for c in 0..s.cols {
            let gr = gradient_1d(|i| s.at(i, c), s.rows, r);
            let gc = gradient_1d(|j| s.at(r, j), s.cols, c);
            gmag.push((gr * gr + gc * gc).sqrt());
        }
    }
    let (gmean, gstd) = mean_std(&gmag);
    let mut f = [0.0; FEATURE_DIM];
    f[..6].copy_from_slice(&[mean, std, skew, kurt, gmean, gstd]);
    for &x in v {
        let bin = ((x.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        f[6 + bin] += 1.0;
    }
    for b in &mut f[6..] {
        *b /= n;
    }
    f
}

pub fn slice_features(v: &Grid, view: View) -> Result<Vec<[f64; FEATURE_DIM]>> {
    Ok(slices(v, view)?.iter().map(slice_feature).collect())
}

/// Mean and sample covariance of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl GaussianSummary {
    /// Needs at least `d + 1` samples.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let d = samples.first().map_or(0, Vec::len);
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::shape("gaussian_fit", "samples must share a nonzero dimension".to_string()));
        }
        if samples.len() < d + 1 {
            return Err(Error::Rank(format!("{} samples for {d}-dimensional features; need at least {}", samples.len(), d + 1)));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = Matrix::zeros(d);
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov.data[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov.get(i, j) / (n - 1.0);
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
        Ok(GaussianSummary { mean, cov })
    }
}

/// Squared Fréchet distance between two Gaussians, clipped at zero.
pub fn frechet(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    let d = g1.mean.len();
    if g2.mean.len() != d || g1.cov.n != d || g2.cov.n != d {
        return Err(Error::shape("frechet", format!("dimensions {d} vs {}", g2.mean.len())));
    }
    if g1 == g2 {
        return Ok(0.0);
    }
    let mean_term: f64 = g1.mean.iter().zip(&g2.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let s1_half = jacobi_eigen(&g1.cov)?.map_values(|l| l.max(0.0).sqrt());
    let mut m = s1_half.matmul(&g2.cov).matmul(&s1_half);
    m.symmetrize();
    let tr_sqrt: f64 = jacobi_eigen(&m)?.values.iter().map(|l| l.max(0.0).sqrt()).sum();
    let v = mean_term + g1.cov.trace() + g2.cov.trace() - 2.0 * tr_sqrt;
    Ok(v.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct FidReport {
    pub axial: f64,
    pub sagittal: f64,
    pub coronal: f64,
    pub average: f64,
}

impl FidReport {
    pub fn get(&self, view: View) -> f64 {
        match view {
            View::Axial => self.axial,
            View::Sagittal => self.sagittal,
            View::Coronal => self.coronal,
        }
    }
}

fn pooled(set: &[Grid], view: View) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for v in set {
        out.extend(slice_features(v, view)?.into_iter().map(|f| f.to_vec()));
    }
    Ok(out)
}

/// Per-view Fréchet distance between pooled slice features of two sets of
/// `[X, Y, Z]` volumes.
pub fn fid_by_view(real: &[Grid], synthetic: &[Grid]) -> Result<FidReport> {
    let mut vals = [0.0; 3];
    for (k, view) in View::ALL.into_iter().enumerate() {
        let a = GaussianSummary::fit(&pooled(real, view)?)
            .map_err(|e| Error::Rank(format!("real set, {} view: {e}", view.as_str())))?;
        let b = GaussianSummary::fit(&pooled(synthetic, view)?)
            .map_err(|e| Error::Rank(format!("synthetic set, {} view: {e}", view.as_str())))?;
        vals[k] = frechet(&a, &b)?;
    }
    Ok(FidReport {
        axial: vals[0],
        sagittal: vals[1],
        coronal: vals[2],
        average: (vals[0] + vals[1] + vals[2]) / 3.0,
    })
}

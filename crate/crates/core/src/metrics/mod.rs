//! Overlap, fidelity, distribution and ranking metrics.

mod fid;
pub mod linalg;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volgrid::Grid;

pub use fid::{
    fid_by_view, frechet, slice_feature, slice_features, slices, FidReport, GaussianSummary, Slice, View,
    FEATURE_DIM,
};
pub use linalg::{jacobi_eigen, Eigen, Matrix};

/// Dice overlap of two masks (nonzero = inside). Two empty masks score 1.
pub fn dice(a: &Grid, b: &Grid) -> Result<f64> {
    a.expect_same_shape(b, "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0.0, y != 0.0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Peak signal-to-noise ratio in decibels; identical inputs give `+inf`.
pub fn psnr(x: &Grid, y: &Grid, peak: f64) -> Result<f64> {
    x.expect_same_shape(y, "psnr")?;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Normalized 2-D Gaussian weights, row-major `SSIM_WINDOW²`.
pub fn gaussian_window() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - h).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

/// SSIM of one slice pair: mean over every fully contained Gaussian window,
/// or global statistics when the slice is smaller than the window.
pub fn ssim_slice(a: &Slice, b: &Slice) -> f64 {
    if a.rows < SSIM_WINDOW || a.cols < SSIM_WINDOW {
        let n = a.data.len() as f64;
        let mx = a.data.iter().sum::<f64>() / n;
        let my = b.data.iter().sum::<f64>() / n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (x, y) in a.data.iter().zip(&b.data) {
            vx += (x - mx).powi(2);
            vy += (y - my).powi(2);
            cxy += (x - mx) * (y - my);
        }
        return ssim_formula(mx, my, vx / n, vy / n, cxy / n);
    }
    let w = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=a.rows - SSIM_WINDOW {
        for c0 in 0..=a.cols - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = w[i * SSIM_WINDOW + j];
                    let x = a.at(r0 + i, c0 + j);
                    let y = b.at(r0 + i, c0 + j);
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            total += ssim_formula(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my);
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over axial slices of two `[X, Y, Z]` volumes in `[0, 1]`.
pub fn ssim(x: &Grid, y: &Grid) -> Result<f64> {
    x.expect_same_shape(y, "ssim")?;
    let a = slices(x, View::Axial)?;
    let b = slices(y, View::Axial)?;
    let n = a.len() as f64;
    Ok(a.iter().zip(&b).map(|(p, q)| ssim_slice(p, q)).sum::<f64>() / n)
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("score {i} is NaN")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Invalid(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by score with tied runs grouped.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut rank_sum = 0.0;
    let mut next = 1.0;
    for g in tie_groups(scores) {
        let mid = next + (g.len() as f64 - 1.0) / 2.0;
        rank_sum += mid * g.iter().filter(|&&i| labels[i] == 1).count() as f64;
        next += g.len() as f64;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Tie-aware ROC points from `(0, 0)` to `(1, 1)`, thresholds descending.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for g in tie_groups(scores).into_iter().rev() {
        for &i in &g {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        pts.push(RocPoint {
            threshold: scores[g[0]],
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(pts)
}

/// Trapezoidal area under a curve from [`roc_curve`].
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

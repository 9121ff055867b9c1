//! Synthetic phantom cohorts, stratified folds and minority-class balancing.
//!
//! A phantom is an ellipsoidal liver holding an ellipsoidal tumor over a
//! smooth background. Positive cases add a bright rim on an arc of the liver
//! shell just outside the tumor. A one-voxel zero border and a bright marker
//! column pin the intensity range to exactly `[0, 1]`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{LabelMap, Volume, BACKGROUND, LIVER, TUMOR};
use crate::rng::{derive_seed, stream};
use crate::tlcr::{PatchPair, Provenance};
use crate::volgrid::Grid;

pub const MIN_PHANTOM_DIM: usize = 8;
const MAX_ATTEMPTS: usize = 100;

const LIVER_LEVEL: f64 = 0.45;
const TUMOR_LEVEL: f64 = 0.65;
const MARKER_LEVEL: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Intensity added on the rim of positive cases.
    pub rim_delta: f64,
    /// Rim thickness in voxels outside the tumor surface.
    pub rim_width: f64,
    /// Half-angle of the rim arc in degrees.
    pub arc_half_angle: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            rim_delta: 0.5,
            rim_width: 2.5,
            arc_half_angle: 90.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rim_delta >= 0.0 && self.rim_delta <= 0.5) {
            return Err(Error::Config(format!("phantom.rim_delta {} outside [0, 0.5]", self.rim_delta)));
        }
        if !(self.rim_width > 0.0 && self.rim_width <= 8.0) {
            return Err(Error::Config(format!("phantom.rim_width {} outside (0, 8]", self.rim_width)));
        }
        if !(self.arc_half_angle > 0.0 && self.arc_half_angle <= 180.0) {
            return Err(Error::Config(format!(
                "phantom.arc_half_angle {} outside (0, 180]",
                self.arc_half_angle
            )));
        }
        Ok(())
    }
}

/// A labeled patient record.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub seed: u64,
    pub volume: Volume,
    pub labels: LabelMap,
    pub pni: u8,
    pub provenance: Provenance,
    pub donor: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Geometry of one phantom, shared by its positive and negative variants.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    pub dims: [usize; 3],
    /// Voxels that receive the rim boost when the case is positive.
    pub rim: Vec<bool>,
    liver: Ellipsoid,
    tumor: Ellipsoid,
}

fn idx(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

fn interior(dims: [usize; 3], x: usize, y: usize, z: usize) -> bool {
    x > 0 && y > 0 && z > 0 && x + 1 < dims[0] && y + 1 < dims[1] && z + 1 < dims[2]
}

fn voxels(dims: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..dims[0]).flat_map(move |x| (0..dims[1]).flat_map(move |y| (0..dims[2]).map(move |z| (x, y, z))))
}

fn point(x: usize, y: usize, z: usize) -> [f64; 3] {
    [x as f64, y as f64, z as f64]
}

/// Samples liver and tumor ellipsoids and the rim arc for `seed`.
pub fn phantom_geometry(seed: u64, dims: [usize; 3], cfg: &PhantomConfig) -> Result<PhantomGeometry> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
        return Err(Error::Phantom(format!(
            "dims {dims:?} below the minimum extent {MIN_PHANTOM_DIM}"
        )));
    }
    cfg.validate()?;
    let mut rng = stream(derive_seed(seed, "phantom-geometry", 0));
    let d = dims.map(|v| v as f64);
    let liver = Ellipsoid {
        center: [0, 1, 2].map(|a| (d[a] - 1.0) / 2.0 + rng.random_range(-0.05..0.05) * d[a]),
        axes: [0, 1, 2].map(|a| rng.random_range(0.30..0.40) * d[a]),
    };
    let mut scale = [0, 1, 2].map(|_| rng.random_range(0.30..0.45));
    let mut found = None;
    for _ in 0..MAX_ATTEMPTS {
        let axes = [0, 1, 2].map(|a| (scale[a] * liver.axes[a]).max(0.6));
        let room = [0, 1, 2].map(|a| (liver.axes[a] - axes[a]).max(0.0) * 0.4);
        let center = [0, 1, 2].map(|a| liver.center[a] + rng.random_range(-1.0..=1.0) * room[a]);
        let tumor = Ellipsoid { center, axes };
        let mut n_tumor = 0usize;
        let mut inside = true;
        for (x, y, z) in voxels(dims) {
            let p = point(x, y, z);
            if tumor.rho(p) < 1.0 {
                n_tumor += 1;
                if liver.rho(p) >= 0.9 || !interior(dims, x, y, z) {
                    inside = false;
                    break;
                }
            }
        }
        if inside && n_tumor > 0 {
            found = Some(tumor);
            break;
        }
        scale = scale.map(|s| s * 0.9);
    }
    let tumor = found.ok_or_else(|| {
        Error::Phantom(format!("tumor did not fit inside the liver after {MAX_ATTEMPTS} attempts"))
    })?;

    // The arc direction comes from its own stream so it does not depend on
    // how many shrink attempts were made.
    let mut arc_rng = stream(derive_seed(seed, "phantom-arc", 0));
    let u: [f64; 3] = loop {
        let v: [f64; 3] = [0, 1, 2].map(|_| arc_rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            break v.map(|c| c / n);
        }
    };
    let cos_min = cfg.arc_half_angle.to_radians().cos();
    let shell = 1.0 + cfg.rim_width / tumor.axes.iter().copied().fold(f64::INFINITY, f64::min);
    let mut rim = vec![false; dims.iter().product()];
    for (x, y, z) in voxels(dims) {
        let p = point(x, y, z);
        let r = tumor.rho(p);
        if !(1.0..shell).contains(&r) || liver.rho(p) >= 1.0 || !interior(dims, x, y, z) {
            continue;
        }
        let v = [0, 1, 2].map(|a| p[a] - tumor.center[a]);
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.0 && (v[0] * u[0] + v[1] * u[1] + v[2] * u[2]) / n >= cos_min {
            rim[idx(dims, x, y, z)] = true;
        }
    }
    Ok(PhantomGeometry {
        dims,
        rim,
        liver,
        tumor,
    })
}

/// Smooth texture in `[0, 1]` from a few random plane waves.
fn texture(seed: u64, dims: [usize; 3]) -> Vec<f64> {
    let mut rng = stream(derive_seed(seed, "phantom-texture", 0));
    let waves: Vec<([f64; 3], f64)> = (0..4)
        .map(|_| {
            let k = [0, 1, 2].map(|a| rng.random_range(-1.0..1.0) * std::f64::consts::TAU * 1.5 / dims[a] as f64);
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    voxels(dims)
        .map(|(x, y, z)| {
            let p = point(x, y, z);
            let s: f64 = waves.iter().map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum();
            0.5 + s / 8.0
        })
        .collect()
}

/// Deterministic phantom case.
pub fn generate_phantom(id: &str, seed: u64, pni: u8, dims: [usize; 3], cfg: &PhantomConfig) -> Result<Case> {
    if pni > 1 {
        return Err(Error::Invalid(format!("pni {pni} not in {{0, 1}}")));
    }
    let geo = phantom_geometry(seed, dims, cfg)?;
    let tex = texture(seed, dims);
    let mut rng = stream(derive_seed(seed, "phantom-levels", 0));
    let liver_level = LIVER_LEVEL + rng.random_range(-0.03..0.03);
    let tumor_level = TUMOR_LEVEL + rng.random_range(-0.03..0.03);
    let marker = [1usize, 2].map(|o| o.min(dims[0] - 2));
    let n = dims.iter().product();
    let mut values = vec![0.0; n];
    let mut labels = vec![BACKGROUND; n];
    for (x, y, z) in voxels(dims) {
        let i = idx(dims, x, y, z);
        if !interior(dims, x, y, z) {
            continue;
        }
        let p = point(x, y, z);
        let t = tex[i];
        let (v, l) = if geo.tumor.rho(p) < 1.0 {
            (tumor_level + 0.05 * (t - 0.5), TUMOR)
        } else if geo.liver.rho(p) < 1.0 {
            let rim = if pni == 1 && geo.rim[i] { cfg.rim_delta } else { 0.0 };
            (liver_level + 0.08 * (t - 0.5) + rim, LIVER)
        } else {
            (0.3 * t, BACKGROUND)
        };
        values[i] = v;
        labels[i] = l;
    }
    // bright marker column in the background corner
    for z in 1..dims[2] - 1 {
        for &x in &marker {
            let i = idx(dims, x, 1, z);
            if labels[i] == BACKGROUND {
                values[i] = MARKER_LEVEL;
            }
        }
    }
    // single-precision values survive a float32 NIfTI round trip exactly
    for v in &mut values {
        *v = f64::from(v.clamp(0.0, 1.0) as f32);
    }
    let volume = Volume::new(Grid::new(dims.to_vec(), values)?, [1.0; 3])?;
    let labels = LabelMap::new(dims, labels)?;
    Ok(Case {
        id: id.to_string(),
        seed,
        volume,
        labels,
        pni,
        provenance: Provenance::Real,
        donor: None,
    })
}

/// Fraction of liver-or-tumor voxels that are tumor.
pub fn tumor_liver_fraction(labels: &LabelMap) -> f64 {
    let [_, liver, tumor] = labels.histogram();
    if liver + tumor == 0 {
        return 0.0;
    }
    tumor as f64 / (liver + tumor) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub cases: Vec<Case>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let pos = self.cases.iter().filter(|c| c.pni == 1).count();
        (pos, self.cases.len() - pos)
    }

    pub fn members(&self) -> Vec<(String, u8)> {
        self.cases.iter().map(|c| (c.id.clone(), c.pni)).collect()
    }

    /// Drops cases whose tumor exceeds `max_fraction` of the liver region.
    pub fn exclude_large_tumors(&mut self, max_fraction: f64) -> Vec<String> {
        let mut dropped = Vec::new();
        self.cases.retain(|c| {
            let keep = tumor_liver_fraction(&c.labels) <= max_fraction;
            if !keep {
                dropped.push(c.id.clone());
            }
            keep
        });
        dropped
    }
}

pub fn case_id(index: usize) -> String {
    format!("case{index:03}")
}

/// `n_pos` positive then `n_neg` negative phantoms with per-case seeds.
pub fn build_cohort(seed: u64, n_pos: usize, n_neg: usize, dims: [usize; 3], cfg: &PhantomConfig) -> Result<Cohort> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!("cohort needs both classes, got {n_pos}/{n_neg}")));
    }
    let cases = (0..n_pos + n_neg)
        .map(|i| {
            let pni = u8::from(i < n_pos);
            generate_phantom(&case_id(i), derive_seed(seed, "phantom", i as u64), pni, dims, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { cases })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    /// 1-based fold index.
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Class-stratified shuffled partition into `k` validation folds.
pub fn stratified_kfold(members: &[(String, u8)], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Invalid(format!("k = {k} must be at least 2")));
    }
    let mut seen = BTreeSet::new();
    if let Some((id, _)) = members.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Error::Invalid(format!("duplicate id {id}")));
    }
    let mut rng = stream(derive_seed(seed, "kfold", k as u64));
    let mut order = Vec::with_capacity(members.len());
    for class in [1u8, 0] {
        let mut ids: Vec<&String> = members.iter().filter(|(_, c)| *c == class).map(|(id, _)| id).collect();
        if ids.len() < k {
            return Err(Error::ClassTooSmall {
                class,
                count: ids.len(),
                k,
            });
        }
        ids.shuffle(&mut rng);
        order.extend(ids);
    }
    let mut val: Vec<BTreeSet<&String>> = vec![BTreeSet::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        val[i % k].insert(id);
    }
    Ok(val
        .into_iter()
        .enumerate()
        .map(|(f, v)| FoldSplit {
            fold: f + 1,
            train: members
                .iter()
                .filter(|(id, _)| !v.contains(id))
                .map(|(id, _)| id.clone())
                .collect(),
            val: members
                .iter()
                .filter(|(id, _)| v.contains(id))
                .map(|(id, _)| id.clone())
                .collect(),
        })
        .collect())
}

/// Synthetic positives needed to fill `ratio` of the class deficit.
pub fn synthetic_deficit(n_pos: usize, n_neg: usize, ratio: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("ratio {ratio} outside [0, 1]")));
    }
    if n_neg < n_pos {
        return Err(Error::Invalid(format!(
            "positives ({n_pos}) outnumber negatives ({n_neg}); nothing to balance"
        )));
    }
    Ok((ratio * (n_neg - n_pos) as f64).round() as usize)
}

/// Donor id and replica index for each of `count` synthetic cases, cycling
/// through `donors` in order.
pub fn donor_schedule(donors: &[String], count: usize) -> Result<Vec<(String, usize)>> {
    if count > 0 && donors.is_empty() {
        return Err(Error::Invalid("no positive donors available".into()));
    }
    Ok((0..count)
        .map(|i| (donors[i % donors.len()].clone(), i / donors.len()))
        .collect())
}

/// A patch-level training record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub patch: PatchPair,
    pub donor: Option<String>,
}

pub fn synthetic_id(donor: &str, replica: usize) -> String {
    format!("{donor}-syn{replica:02}")
}

/// Appends synthetic positives to a fold's real training samples.
///
/// `generate(donor, replica)` must return a synthetic patch derived from the
/// donor's mask; its class is forced to the donor's.
pub fn balance_fold(
    train: &[Sample],
    ratio: f64,
    mut generate: impl FnMut(&Sample, usize) -> Result<PatchPair>,
) -> Result<Vec<Sample>> {
    if train.iter().any(|s| s.patch.provenance != Provenance::Real) {
        return Err(Error::Invalid("balance_fold expects a real-only training split".into()));
    }
    let pos: Vec<&Sample> = train.iter().filter(|s| s.patch.pni == 1).collect();
    let n_neg = train.len() - pos.len();
    let count = synthetic_deficit(pos.len(), n_neg, ratio)?;
    let donors: Vec<String> = pos.iter().map(|s| s.id.clone()).collect();
    let mut out = train.to_vec();
    for (donor, replica) in donor_schedule(&donors, count)? {
        let d = pos.iter().find(|s| s.id == donor).expect("donor drawn from positives");
        let mut patch = generate(d, replica)?;
        patch.provenance = Provenance::Synthetic;
        patch.pni = d.patch.pni;
        out.push(Sample {
            id: synthetic_id(&donor, replica),
            patch,
            donor: Some(donor),
        });
    }
    Ok(out)
}

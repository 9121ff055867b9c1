//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tape::{NodeId, Tape};
use super::Grid;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step, within `[1e-6, 1e-4]`.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// When set, probe at most this many coordinates per input, chosen by
    /// `seed`. `None` probes every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose ±step probes crossed a relu or max-selection kink.
    pub skipped_kinks: usize,
    /// Location of the first non-finite value encountered.
    pub non_finite: Option<String>,
    pub passed: bool,
}

/// Relative error with a `1e-8` floor on the denominator.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences at `point`. Every entry of `point` becomes a
/// trainable leaf, handed to `build` in order.
///
/// Probes whose two evaluations take a different relu/argmax branch than
/// the base point are excluded and counted in `skipped_kinks`.
pub fn grad_check<F>(build: F, point: &[Grid], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&cfg.step) {
        return Err(Error::Invalid(format!("finite-difference step {} outside [1e-6, 1e-4]", cfg.step)));
    }
    let eval = |pt: &[Grid]| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = pt.iter().map(|g| t.constant(g.clone())).collect();
        let root = build(&mut t, &ids)?;
        Ok((t.value(root).item(), t.kink_signature()))
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = point.iter().map(|g| tape.param(g)).collect();
    let root = build(&mut tape, &ids)?;
    let base_sig = tape.kink_signature();
    let base_val = tape.value(root).clone();
    let grads = tape.backward(root)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        non_finite: None,
        passed: true,
    };
    if !base_val.is_finite() {
        report.non_finite = Some("root value".into());
        report.passed = false;
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Grid> = point.to_vec();
    for (inp, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id);
        if let Some(j) = analytic.data().iter().position(|v| !v.is_finite()) {
            report.non_finite = Some(format!("analytic gradient of input {inp} at coordinate {j}"));
            report.passed = false;
            return Ok(report);
        }
        let n = point[inp].len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = point[inp].data()[j];
            work[inp].data_mut()[j] = orig + cfg.step;
            let (fp, sp) = eval(&work)?;
            work[inp].data_mut()[j] = orig - cfg.step;
            let (fm, sm) = eval(&work)?;
            work[inp].data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite = Some(format!("perturbed value at input {inp} coordinate {j}"));
                report.passed = false;
                return Ok(report);
            }
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = rel_error(analytic.data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((inp, j));
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance && report.checked > 0;
    Ok(report)
}

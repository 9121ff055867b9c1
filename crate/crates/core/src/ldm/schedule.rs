//! Linear DDPM noise schedule and the closed-form forward marginal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Running product kept as an unevaluated sum `hi + lo`.
#[derive(Clone, Copy)]
struct Compensated {
    hi: f64,
    lo: f64,
}

impl Compensated {
    fn mul(self, a: f64) -> Self {
        let p = self.hi * a;
        let err = self.hi.mul_add(a, -p);
        let lo = self.lo.mul_add(a, err);
        let hi = p + lo;
        Compensated {
            hi,
            lo: lo - (hi - p),
        }
    }
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_1` to `beta_t`.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::Invalid(format!(
                "betas must satisfy 0 < beta_1 <= beta_T < 1, got {beta_1} and {beta_t}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_1
                } else {
                    beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Invalid("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("betas must be nondecreasing".into()));
        }
        let mut acc = Compensated { hi: 1.0, lo: 0.0 };
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc = acc.mul(1.0 - b);
                acc.hi
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn paper_default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `β_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative product `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Reverse-step noise standard deviation (`σ_t² = β_t`).
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }

    /// `z_t = √ᾱ_t z0 + √(1 − ᾱ_t) ε`.
    pub fn forward_diffuse(&self, z0: &Grid, t: usize, eps: &Grid) -> Result<Grid> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        diffuse_with(z0, ab, eps)
    }

    /// Inverts [`forward_diffuse`](Self::forward_diffuse) given the noise.
    pub fn recover_z0(&self, zt: &Grid, t: usize, eps: &Grid) -> Result<Grid> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        zt.zip_map(eps, |z, e| (z - b * e) / a)
    }

    pub fn validate_t(&self, t: usize) -> Result<()> {
        self.check(t)
    }
}

/// Forward marginal for an explicit `ᾱ`, including the limits 0 and 1.
pub fn diffuse_with(z0: &Grid, alpha_bar: f64, eps: &Grid) -> Result<Grid> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

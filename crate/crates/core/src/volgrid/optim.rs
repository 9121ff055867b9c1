//! AdamW with bias correction and decoupled weight decay.

use crate::error::{Error, Result};

use super::Grid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Optimizer state: one pair of moment accumulators per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Grid>,
    second: Vec<Grid>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Moments are allocated on the first call
    /// and must keep matching the parameter shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Grid], grads: &[Grid]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Grid::zeros(p.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::shape("adamw", "parameter count changed between steps"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.expect_same_shape(g, "adamw")?;
            p.expect_same_shape(&self.first[i], "adamw")?;
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = Grid::from_vec(vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Grid::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut p = Grid::from_vec(vec![0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        });
        opt.step(&mut [&mut p], &[Grid::from_vec(vec![1.0])]).unwrap();
        // m̂ = 1, v̂ = 1 -> Δ = -0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-16);
        assert!(p.item() > -0.1);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = Grid::from_vec(vec![2.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        });
        opt.step(&mut [&mut p], &[Grid::zeros(&[1])]).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Grid::zeros(&[2]);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step(&mut [&mut p], &[Grid::zeros(&[3])]).is_err());
    }
}

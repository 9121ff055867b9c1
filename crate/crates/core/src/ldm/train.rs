//! Training loops for the autoencoder and the noise predictor, and the
//! ancestral sampler.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::volgrid::layers::{gather_grads, Parameterized};
use crate::volgrid::tape::LOGVAR_FLOOR;
use crate::volgrid::{AdamW, AdamWConfig, Grid, Tape};

use super::schedule::NoiseSchedule;
use super::unet::{ldm_loss_node, Denoiser};
use super::vae::{check_patch_shape, vae_loss_node, Vae};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Steps per checkpoint window; the window with the lowest mean loss
    /// supplies the returned parameters.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.0,
            checkpoint_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(format!("{stage}: batch_size and checkpoint_every must be positive")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("{stage}: lr and weight_decay must be finite and nonnegative")));
        }
        Ok(())
    }
}

/// Per-step batch losses and the checkpoint that was kept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    /// Last step of the best window (0 when no step ran).
    pub best_step: usize,
    pub best_loss: f64,
}

/// Visits indices in freshly shuffled epochs.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub(crate) fn new(n: usize) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub(crate) fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Generic minibatch AdamW loop. `job` draws the per-sample randomness in
/// batch order, `loss_grad` returns the sample loss and the gradients in
/// `params_mut` order.
pub(crate) fn fit<M, J>(
    mut model: M,
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
    mut job: impl FnMut(usize, &mut ChaCha8Rng) -> Result<J>,
    mut loss_grad: impl FnMut(&M, &J) -> Result<(f64, Vec<Grid>)>,
) -> Result<(M, TrainHistory)>
where
    M: Parameterized + Clone,
{
    if n == 0 {
        return Err(Error::EmptySplit);
    }
    cfg.validate("train")?;
    let mut rng = stream(seed);
    let mut sampler = EpochSampler::new(n);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut history = TrainHistory {
        losses: Vec::with_capacity(cfg.steps),
        best_step: 0,
        best_loss: f64::INFINITY,
    };
    let mut best = model.clone();
    for step in 1..=cfg.steps {
        let jobs = (0..cfg.batch_size)
            .map(|_| {
                let i = sampler.next(&mut rng);
                job(i, &mut rng)
            })
            .collect::<Result<Vec<J>>>()?;
        let mut total = 0.0;
        let mut acc: Option<Vec<Grid>> = None;
        for j in &jobs {
            let (loss, grads) = loss_grad(&model, j)?;
            total += loss;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (a, g) in a.iter_mut().zip(&grads) {
                        a.add_assign(g)?;
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let grads: Vec<Grid> = acc.unwrap_or_default().iter().map(|g| g.map(|v| v * inv)).collect();
        opt.step(&mut model.params_mut(), &grads)?;
        let loss = total * inv;
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("training diverged at step {step}")));
        }
        history.losses.push(loss);
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let start = (step - 1) / cfg.checkpoint_every * cfg.checkpoint_every;
            let window = &history.losses[start..step];
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            if mean < history.best_loss {
                history.best_loss = mean;
                history.best_step = step;
                best = model.clone();
            }
        }
    }
    Ok((best, history))
}

/// Trains the autoencoder on 2-channel patch images.
pub fn train_vae(vae: Vae, images: &[Grid], cfg: &TrainConfig, seed: u64) -> Result<(Vae, TrainHistory)> {
    for x in images {
        check_patch_shape(x)?;
    }
    let kl_weight = vae.config.kl_weight;
    fit(
        vae,
        images.len(),
        cfg,
        seed,
        |i, rng| {
            let x = &images[i];
            let shape = [
                x.shape()[0],
                x.shape()[1] / 4,
                x.shape()[2] / 4,
                x.shape()[3] / 4,
            ];
            Ok((i, shape, rng.random::<u64>()))
        },
        |vae, &(i, shape, noise_seed)| {
            let mut t = Tape::new();
            let nodes = vae.bind(&mut t, true);
            let x = t.constant(images[i].clone());
            let (mu, logvar) = nodes.encode(&mut t, x)?;
            let cz = vae.config.latent_channels;
            let noise = Grid::randn(&[cz, shape[1], shape[2], shape[3]], &mut stream(noise_seed));
            let z = t.reparameterize(mu, logvar, noise)?;
            let xhat = nodes.decode(&mut t, z)?;
            let loss = vae_loss_node(&mut t, x, xhat, mu, logvar, kl_weight)?;
            let value = t.value(loss).item();
            let g = t.backward(loss)?;
            Ok((value, gather_grads(&g, &nodes.ids())))
        },
    )
}

/// Diagonal Gaussian posterior of one encoded patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mu: Grid,
    pub logvar: Grid,
}

impl Posterior {
    pub fn encode(vae: &Vae, x: &Grid) -> Result<Self> {
        let (mu, logvar) = vae.encode(x)?;
        Ok(Posterior { mu, logvar })
    }

    /// Posterior of `s · z`.
    pub fn scaled(&self, s: f64) -> Posterior {
        let shift = 2.0 * s.ln();
        Posterior {
            mu: self.mu.map(|m| m * s),
            logvar: self.logvar.map(|l| l + shift),
        }
    }

    /// `μ + exp(logvar / 2) ⊙ ε`.
    pub fn sample(&self, eps: &Grid) -> Result<Grid> {
        let scale = self.logvar.map(|l| if l < LOGVAR_FLOOR { 0.0 } else { (0.5 * l).exp() });
        let se = scale.zip_map(eps, |a, b| a * b)?;
        self.mu.zip_map(&se, |m, v| m + v)
    }
}

/// Reciprocal standard deviation of all posterior means, used to bring
/// latents to unit scale before diffusion.
pub fn latent_scale(posteriors: &[Posterior]) -> f64 {
    let vals: Vec<f64> = posteriors.iter().flat_map(|p| p.mu.data().iter().copied()).collect();
    if vals.len() < 2 {
        return 1.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 1e-24 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

/// One diffusion training example: latent, timestep and target noise.
#[derive(Clone, Debug)]
pub struct DiffusionSample {
    pub index: usize,
    pub z0: Grid,
    pub t: usize,
    pub eps: Grid,
}

/// Draws `z ~ q(z|x)`, `t ~ U{1..T}` and `ε ~ N(0, I)` from `rng`.
pub fn draw_diffusion_sample(
    index: usize,
    posterior: &Posterior,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionSample> {
    let shape = posterior.mu.shape().to_vec();
    let z0 = posterior.sample(&Grid::randn(&shape, rng))?;
    let t = rng.random_range(1..=schedule.steps());
    let eps = Grid::randn(&shape, rng);
    Ok(DiffusionSample { index, z0, t, eps })
}

/// `mean((ε − ε_θ(z_t, t))²)` for one sample.
pub fn ldm_loss(den: &Denoiser, schedule: &NoiseSchedule, z0: &Grid, t: usize, eps: &Grid) -> Result<f64> {
    let zt = schedule.forward_diffuse(z0, t, eps)?;
    let pred = den.predict(&zt, t)?;
    Ok(pred.zip_map(eps, |a, b| (a - b).powi(2))?.mean())
}

/// Trains the noise predictor on posteriors of the (frozen) autoencoder.
pub fn train_denoiser(
    den: Denoiser,
    posteriors: &[Posterior],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Denoiser, TrainHistory)> {
    fit(
        den,
        posteriors.len(),
        cfg,
        seed,
        |i, rng| draw_diffusion_sample(i, &posteriors[i], schedule, rng),
        |den, s| {
            let zt = schedule.forward_diffuse(&s.z0, s.t, &s.eps)?;
            let mut t = Tape::new();
            let nodes = den.bind(&mut t, true);
            let x = t.constant(zt);
            let emb = den.embed(&mut t, s.t);
            let y = nodes.forward(&mut t, x, emb)?;
            let loss = ldm_loss_node(&mut t, y, &s.eps)?;
            let value = t.value(loss).item();
            let g = t.backward(loss)?;
            Ok((value, gather_grads(&g, &nodes.ids())))
        },
    )
}

/// Ancestral DDPM sampling from `z_T ~ N(0, I)` with `σ_t² = β_t`.
/// `predict(z_t, t)` returns the noise estimate.
pub fn ddpm_sample(
    schedule: &NoiseSchedule,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
    mut predict: impl FnMut(&Grid, usize) -> Result<Grid>,
) -> Result<Grid> {
    let mut z = Grid::randn(shape, rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = predict(&z, t)?;
        let (a, b) = (schedule.alpha(t), schedule.beta(t));
        let k = b / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv = 1.0 / a.sqrt();
        let mean = z.zip_map(&eps, |zv, e| inv * (zv - k * e))?;
        z = if t > 1 {
            let xi = Grid::randn(shape, rng);
            let s = schedule.sigma(t);
            mean.zip_map(&xi, |m, x| m + s * x)?
        } else {
            mean
        };
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldm::unet::DenoiserConfig;
    use crate::ldm::vae::VaeConfig;

    fn cfg(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            lr,
            weight_decay: 0.0,
            checkpoint_every: 5,
        }
    }

    #[test]
    fn zero_lr_leaves_params_and_history_has_step_count() {
        let mut rng = stream(0);
        let vae = Vae::new(VaeConfig::default(), &mut rng);
        let imgs = vec![Grid::uniform(&[2, 8, 8, 4], 0.0, 1.0, &mut rng); 3];
        let (out, h) = train_vae(vae.clone(), &imgs, &cfg(7, 0.0), 1).unwrap();
        assert_eq!(out.checksum(), vae.checksum());
        assert_eq!(h.losses.len(), 7);
        assert!(train_vae(vae, &[], &cfg(1, 0.0), 1).is_err());
    }

    #[test]
    fn vae_training_is_reproducible_and_reduces_loss() {
        let mut rng = stream(2);
        let vae = Vae::new(VaeConfig::default(), &mut rng);
        let imgs: Vec<Grid> = (0..4).map(|_| Grid::uniform(&[2, 8, 8, 4], 0.0, 1.0, &mut rng)).collect();
        let c = cfg(40, 3e-3);
        let (a, ha) = train_vae(vae.clone(), &imgs, &c, 9).unwrap();
        let (b, hb) = train_vae(vae, &imgs, &c, 9).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ha, hb);
        assert!(ha.best_loss < ha.losses[0]);
    }

    #[test]
    fn sampler_with_zero_predictor_single_step() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let z = ddpm_sample(&s, &[4, 2, 2, 1], &mut stream(5), |z, _| Ok(Grid::zeros(z.shape()))).unwrap();
        let z1 = Grid::randn(&[4, 2, 2, 1], &mut stream(5));
        let expect = z1.map(|v| v / 0.7f64.sqrt());
        assert!(z.max_abs_diff(&expect).unwrap() < 1e-15);
        let again = ddpm_sample(&s, &[4, 2, 2, 1], &mut stream(5), |z, _| Ok(Grid::zeros(z.shape()))).unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn ldm_loss_trivial_cases() {
        let mut d = Denoiser::new(DenoiserConfig::default(), &mut stream(1));
        for p in d.params_mut() {
            p.data_mut().fill(0.0);
        }
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let z0 = Grid::randn(&[4, 3, 3, 2], &mut stream(2));
        assert_eq!(ldm_loss(&d, &s, &z0, 3, &Grid::zeros(&[4, 3, 3, 2])).unwrap(), 0.0);
        let ones = Grid::full(&[4, 3, 3, 2], 1.0);
        assert_eq!(ldm_loss(&d, &s, &z0, 3, &ones).unwrap(), 1.0);
    }

    #[test]
    fn denoiser_training_freezes_nothing_else_and_learns() {
        let mut rng = stream(4);
        let vae = Vae::new(VaeConfig::default(), &mut rng);
        let before = vae.checksum();
        let posts: Vec<Posterior> = (0..4)
            .map(|_| Posterior::encode(&vae, &Grid::uniform(&[2, 12, 12, 8], 0.0, 1.0, &mut rng)).unwrap())
            .collect();
        let k = latent_scale(&posts);
        let posts: Vec<Posterior> = posts.iter().map(|p| p.scaled(k)).collect();
        let s = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let den = Denoiser::new(DenoiserConfig::default(), &mut rng);
        let (_, h) = train_denoiser(den, &posts, &s, &cfg(30, 2e-3), 3).unwrap();
        assert_eq!(h.losses.len(), 30);
        assert_eq!(vae.checksum(), before);
    }

    #[test]
    fn posterior_scaling_and_floor() {
        let p = Posterior {
            mu: Grid::full(&[1, 1, 1, 2], 2.0),
            logvar: Grid::new(vec![1, 1, 1, 2], vec![-100.0, 0.0]).unwrap(),
        };
        let e = Grid::full(&[1, 1, 1, 2], 1.0);
        assert_eq!(p.sample(&e).unwrap().data(), &[2.0, 3.0]);
        let q = p.scaled(0.5);
        assert_eq!(q.sample(&e).unwrap().data()[1], 1.5);
    }
}

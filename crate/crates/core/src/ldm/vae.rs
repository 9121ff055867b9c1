//! Small convolutional VAE mapping `[2, X, Y, Z]` patches to
//! `[C_z, X/4, Y/4, Z/4]` latents.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::layers::{ConvNodes, Parameterized};
use crate::volgrid::{ops, Conv3d, Grid, NodeId, Tape};

pub const IMAGE_CHANNELS: usize = 2;
const INITIAL_LOGVAR: f64 = -4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_channels: usize,
    /// Channels after the first and second stride-2 stages.
    pub widths: [usize; 2],
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_channels: 4,
            widths: [8, 16],
            kl_weight: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    enc1: Conv3d,
    enc2: Conv3d,
    mu: Conv3d,
    logvar: Conv3d,
    dec1: Conv3d,
    dec2: Conv3d,
    dec3: Conv3d,
}

/// A [`Vae`] recorded on a tape.
pub struct VaeNodes {
    enc1: ConvNodes,
    enc2: ConvNodes,
    mu: ConvNodes,
    logvar: ConvNodes,
    dec1: ConvNodes,
    dec2: ConvNodes,
    dec3: ConvNodes,
}

pub fn check_patch_shape(x: &Grid) -> Result<[usize; 3]> {
    let s = x.spatial()?;
    if x.channels() != IMAGE_CHANNELS {
        return Err(Error::shape("vae", format!("expected {IMAGE_CHANNELS} channels, got {}", x.channels())));
    }
    if let Some(a) = (0..3).find(|&a| s[a] % 4 != 0) {
        return Err(Error::shape("vae", format!("spatial axis {a} of {s:?} is not divisible by 4")));
    }
    Ok(s)
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Self {
        let [w1, w2] = config.widths;
        let cz = config.latent_channels;
        let mut logvar = Conv3d::zeros(w2, cz, 1, 1, 0);
        // start with a narrow posterior so early reconstructions are not
        // dominated by sampling noise
        logvar.bias.data_mut().fill(INITIAL_LOGVAR);
        Vae {
            enc1: Conv3d::new(IMAGE_CHANNELS, w1, 3, 2, 1, rng),
            enc2: Conv3d::new(w1, w2, 3, 2, 1, rng),
            mu: Conv3d::new(w2, cz, 1, 1, 0, rng),
            logvar,
            dec1: Conv3d::new(cz, w2, 3, 1, 1, rng),
            dec2: Conv3d::new(w2, w1, 3, 1, 1, rng),
            dec3: Conv3d::new(w1, IMAGE_CHANNELS, 3, 1, 1, rng),
            config,
        }
    }

    /// Zeroes both latent heads, so encodings start at `μ = 0, logvar = 0`.
    pub fn zero_heads(&mut self) {
        for g in self.mu.params_mut().into_iter().chain(self.logvar.params_mut()) {
            g.data_mut().fill(0.0);
        }
    }

    pub fn latent_shape(&self, patch: [usize; 3]) -> [usize; 4] {
        [self.config.latent_channels, patch[0] / 4, patch[1] / 4, patch[2] / 4]
    }

    fn trunk(&self, x: &Grid) -> Result<Grid> {
        check_patch_shape(x)?;
        let h = ops::relu(&self.enc1.forward(x)?);
        Ok(ops::relu(&self.enc2.forward(&h)?))
    }

    /// `(μ, logvar)` for one patch image.
    pub fn encode(&self, x: &Grid) -> Result<(Grid, Grid)> {
        let h = self.trunk(x)?;
        Ok((self.mu.forward(&h)?, self.logvar.forward(&h)?))
    }

    pub fn encode_mean(&self, x: &Grid) -> Result<Grid> {
        self.mu.forward(&self.trunk(x)?)
    }

    pub fn decode(&self, z: &Grid) -> Result<Grid> {
        let [d, h, w] = z.spatial()?;
        let a = ops::relu(&self.dec1.forward(z)?);
        let a = ops::upsample_nearest(&a, [2 * d, 2 * h, 2 * w])?;
        let a = ops::relu(&self.dec2.forward(&a)?);
        let a = ops::upsample_nearest(&a, [4 * d, 4 * h, 4 * w])?;
        self.dec3.forward(&a)
    }

    /// Decodes the posterior mean.
    pub fn reconstruct(&self, x: &Grid) -> Result<Grid> {
        self.decode(&self.encode_mean(x)?)
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> VaeNodes {
        VaeNodes {
            enc1: self.enc1.bind(t, trainable),
            enc2: self.enc2.bind(t, trainable),
            mu: self.mu.bind(t, trainable),
            logvar: self.logvar.bind(t, trainable),
            dec1: self.dec1.bind(t, trainable),
            dec2: self.dec2.bind(t, trainable),
            dec3: self.dec3.bind(t, trainable),
        }
    }

    /// Encoder tensors only, in [`Parameterized`] order.
    pub fn encoder_params(&self) -> Vec<(String, &Grid)> {
        let mut v = self.enc1.named_params("enc1");
        v.extend(self.enc2.named_params("enc2"));
        v.extend(self.mu.named_params("mu"));
        v
    }
}

impl Parameterized for Vae {
    fn named_params(&self) -> Vec<(String, &Grid)> {
        let mut v = self.enc1.named_params("enc1");
        v.extend(self.enc2.named_params("enc2"));
        v.extend(self.mu.named_params("mu"));
        v.extend(self.logvar.named_params("logvar"));
        v.extend(self.dec1.named_params("dec1"));
        v.extend(self.dec2.named_params("dec2"));
        v.extend(self.dec3.named_params("dec3"));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Grid> {
        let mut v = self.enc1.params_mut();
        v.extend(self.enc2.params_mut());
        v.extend(self.mu.params_mut());
        v.extend(self.logvar.params_mut());
        v.extend(self.dec1.params_mut());
        v.extend(self.dec2.params_mut());
        v.extend(self.dec3.params_mut());
        v
    }
}

impl VaeNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        [&self.enc1, &self.enc2, &self.mu, &self.logvar, &self.dec1, &self.dec2, &self.dec3]
            .iter()
            .flat_map(|c| c.ids())
            .collect()
    }

    fn trunk(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = self.enc1.apply(t, x)?;
        let h = t.relu(h);
        let h = self.enc2.apply(t, h)?;
        Ok(t.relu(h))
    }

    pub fn encode(&self, t: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.trunk(t, x)?;
        Ok((self.mu.apply(t, h)?, self.logvar.apply(t, h)?))
    }

    pub fn encode_mean(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = self.trunk(t, x)?;
        self.mu.apply(t, h)
    }

    pub fn decode(&self, t: &mut Tape, z: NodeId) -> Result<NodeId> {
        let [d, h, w] = t.value(z).spatial()?;
        let a = self.dec1.apply(t, z)?;
        let a = t.relu(a);
        let a = t.upsample(a, [2 * d, 2 * h, 2 * w])?;
        let a = self.dec2.apply(t, a)?;
        let a = t.relu(a);
        let a = t.upsample(a, [4 * d, 4 * h, 4 * w])?;
        self.dec3.apply(t, a)
    }
}

/// `mean|x − x̂| + kl_weight · KL` recorded on the tape.
pub fn vae_loss_node(t: &mut Tape, x: NodeId, xhat: NodeId, mu: NodeId, logvar: NodeId, kl_weight: f64) -> Result<NodeId> {
    let d = t.sub(xhat, x)?;
    let l1 = t.mean_abs(d);
    let kl = t.kl_standard_normal(mu, logvar)?;
    let kl = t.scale(kl, kl_weight);
    t.add(l1, kl)
}

/// Value of the VAE objective for given tensors.
pub fn vae_loss(x: &Grid, xhat: &Grid, mu: &Grid, logvar: &Grid, kl_weight: f64) -> Result<f64> {
    x.expect_same_shape(xhat, "vae_loss")?;
    mu.expect_same_shape(logvar, "vae_loss")?;
    let l1 = x.data().iter().zip(xhat.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    let kl = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum::<f64>()
        / mu.len() as f64;
    Ok(l1 + kl_weight * kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn latent_shape_and_zero_heads() {
        let mut rng = stream(0);
        let mut vae = Vae::new(VaeConfig::default(), &mut rng);
        vae.zero_heads();
        let x = Grid::zeros(&[2, 24, 24, 12]);
        let (mu, lv) = vae.encode(&x).unwrap();
        assert_eq!(mu.shape(), &[4, 6, 6, 3]);
        assert!(mu.data().iter().chain(lv.data()).all(|&v| v == 0.0));
        assert_eq!(vae.decode(&mu).unwrap().shape(), &[2, 24, 24, 12]);
        assert!(vae.encode(&Grid::zeros(&[2, 24, 24, 10])).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_tape_agrees() {
        let mut rng = stream(1);
        let vae = Vae::new(VaeConfig::default(), &mut rng);
        let x = Grid::uniform(&[2, 8, 8, 4], 0.0, 1.0, &mut rng);
        let (m1, _) = vae.encode(&x).unwrap();
        let (m2, _) = vae.encode(&x).unwrap();
        assert_eq!(m1, m2);
        let mut t = Tape::new();
        let nodes = vae.bind(&mut t, false);
        let xi = t.constant(x.clone());
        let (mu, _) = nodes.encode(&mut t, xi).unwrap();
        assert_eq!(t.value(mu), &m1);
        let r = nodes.decode(&mut t, mu).unwrap();
        assert_eq!(t.value(r), &vae.decode(&m1).unwrap());
        assert_eq!(nodes.ids().len(), vae.named_params().len());
    }

    #[test]
    fn loss_examples() {
        let x = Grid::full(&[2, 4, 4, 4], 0.3);
        let z = Grid::zeros(&[4, 1, 1, 1]);
        assert_eq!(vae_loss(&x, &x, &z, &z, 1e-7).unwrap(), 0.0);
        let ones = Grid::full(&[4, 1, 1, 1], 1.0);
        assert!((vae_loss(&x, &x, &ones, &z, 1e-7).unwrap() - 0.5e-7).abs() < 1e-20);
        let off = x.map(|v| v + 0.2);
        assert!((vae_loss(&x, &off, &z, &z, 1e-7).unwrap() - 0.2).abs() < 1e-12);
    }
}

//! Latent noise predictor: a two-level 3D U-Net with sinusoidal timestep
//! embeddings added as per-channel biases.
//!
//! ```text
//! x ─ in ─ h0 ─ down1 ─ h1 ─ down2 ─ h2 ─ mid ─ m
//!          │            │            └────(+)───┘
//!          │            └── concat ─ up2 ─ upsample(m + h2)
//!          └── concat ─ up1 ─ upsample(u2) ─ out
//! ```
//!
//! The encoder side (in, down1, down2, mid) is exposed as blocks so a
//! control branch can copy them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::layers::{ConvNodes, LinearNodes, Parameterized};
use crate::volgrid::{Conv3d, Grid, Linear, NodeId, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channels at full latent resolution and at the bottleneck.
    pub widths: [usize; 2],
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            widths: [16, 32],
            time_dim: 16,
        }
    }
}

/// Sinusoidal embedding of timestep `t` with `dim` entries (sines, then
/// cosines).
pub fn timestep_embedding(t: usize, dim: usize) -> Grid {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        e[i] = (t as f64 * freq).sin();
        e[half + i] = (t as f64 * freq).cos();
    }
    Grid::from_vec(e)
}

/// `relu(conv(x) + W·emb + b)`, or without the embedding term.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub conv: Conv3d,
    pub time: Option<Linear>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockNodes {
    conv: ConvNodes,
    time: Option<LinearNodes>,
}

impl Block {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, time_dim: Option<usize>, rng: &mut R) -> Self {
        Block {
            conv: Conv3d::new(cin, cout, 3, stride, 1, rng),
            time: time_dim.map(|e| Linear::new(e, cout, rng)),
        }
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> BlockNodes {
        BlockNodes {
            conv: self.conv.bind(t, trainable),
            time: self.time.as_ref().map(|l| l.bind(t, trainable)),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Grid)> {
        let mut v = self.conv.named_params(&format!("{prefix}.conv"));
        if let Some(l) = &self.time {
            v.extend(l.named_params(&format!("{prefix}.time")));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Grid> {
        let mut v = self.conv.params_mut();
        if let Some(l) = &mut self.time {
            v.extend(l.params_mut());
        }
        v
    }
}

impl BlockNodes {
    pub fn apply(&self, t: &mut Tape, x: NodeId, emb: NodeId) -> Result<NodeId> {
        let mut h = self.conv.apply(t, x)?;
        if let Some(l) = &self.time {
            let b = l.apply(t, emb)?;
            h = t.add_channel_bias(h, b)?;
        }
        Ok(t.relu(h))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = self.conv.ids().to_vec();
        if let Some(l) = &self.time {
            v.extend(l.ids());
        }
        v
    }
}

/// Encoder-side blocks, shared in layout by the trunk and control branch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlocks {
    pub input: Block,
    pub down1: Block,
    pub down2: Block,
    pub mid: Block,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    pub input: BlockNodes,
    pub down1: BlockNodes,
    pub down2: BlockNodes,
    pub mid: BlockNodes,
}

/// Encoder-side activations: the skip features and the bottleneck output.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub h0: NodeId,
    pub h1: NodeId,
    pub h2: NodeId,
    pub mid: NodeId,
}

impl EncoderBlocks {
    pub fn bind(&self, t: &mut Tape, trainable: bool) -> EncoderNodes {
        EncoderNodes {
            input: self.input.bind(t, trainable),
            down1: self.down1.bind(t, trainable),
            down2: self.down2.bind(t, trainable),
            mid: self.mid.bind(t, trainable),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Grid)> {
        let mut v = self.input.named_params(&format!("{prefix}.in"));
        v.extend(self.down1.named_params(&format!("{prefix}.down1")));
        v.extend(self.down2.named_params(&format!("{prefix}.down2")));
        v.extend(self.mid.named_params(&format!("{prefix}.mid")));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Grid> {
        let mut v = self.input.params_mut();
        v.extend(self.down1.params_mut());
        v.extend(self.down2.params_mut());
        v.extend(self.mid.params_mut());
        v
    }

    pub fn widths(&self) -> [usize; 4] {
        [&self.input, &self.down1, &self.down2, &self.mid].map(|b| b.conv.out_channels())
    }
}

impl EncoderNodes {
    pub fn forward(&self, t: &mut Tape, x: NodeId, emb: NodeId) -> Result<EncoderFeatures> {
        let h0 = self.input.apply(t, x, emb)?;
        let h1 = self.down1.apply(t, h0, emb)?;
        let h2 = self.down2.apply(t, h1, emb)?;
        let mid = self.mid.apply(t, h2, emb)?;
        Ok(EncoderFeatures { h0, h1, h2, mid })
    }

    pub fn ids(&self) -> Vec<NodeId> {
        [&self.input, &self.down1, &self.down2, &self.mid]
            .iter()
            .flat_map(|b| b.ids())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub encoder: EncoderBlocks,
    up2: Block,
    up1: Block,
    out: Conv3d,
}

pub struct DenoiserNodes {
    pub encoder: EncoderNodes,
    up2: BlockNodes,
    up1: BlockNodes,
    out: ConvNodes,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Self {
        let cz = config.latent_channels;
        let [w0, w1] = config.widths;
        let e = Some(config.time_dim);
        let encoder = EncoderBlocks {
            input: Block::new(cz, w0, 1, None, rng),
            down1: Block::new(w0, w0, 2, e, rng),
            down2: Block::new(w0, w1, 2, e, rng),
            mid: Block::new(w1, w1, 1, e, rng),
        };
        Denoiser {
            encoder,
            up2: Block::new(w1 + w0, w0, 1, e, rng),
            up1: Block::new(w0 + w0, w0, 1, None, rng),
            out: Conv3d::new(w0, cz, 3, 1, 1, rng),
            config,
        }
    }

    pub fn bind(&self, t: &mut Tape, trainable: bool) -> DenoiserNodes {
        DenoiserNodes {
            encoder: self.encoder.bind(t, trainable),
            up2: self.up2.bind(t, trainable),
            up1: self.up1.bind(t, trainable),
            out: self.out.bind(t, trainable),
        }
    }

    pub fn embed(&self, t: &mut Tape, step: usize) -> NodeId {
        t.constant(timestep_embedding(step, self.config.time_dim))
    }

    /// Predicted noise for latent `x` at timestep `step`.
    pub fn predict(&self, x: &Grid, step: usize) -> Result<Grid> {
        let mut t = Tape::new();
        let nodes = self.bind(&mut t, false);
        let xi = t.constant(x.clone());
        let emb = self.embed(&mut t, step);
        let y = nodes.forward(&mut t, xi, emb)?;
        Ok(t.value(y).clone())
    }
}

impl Parameterized for Denoiser {
    fn named_params(&self) -> Vec<(String, &Grid)> {
        let mut v = self.encoder.named_params("enc");
        v.extend(self.up2.named_params("up2"));
        v.extend(self.up1.named_params("up1"));
        v.extend(self.out.named_params("out"));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Grid> {
        let mut v = self.encoder.params_mut();
        v.extend(self.up2.params_mut());
        v.extend(self.up1.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

impl DenoiserNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = self.encoder.ids();
        v.extend(self.up2.ids());
        v.extend(self.up1.ids());
        v.extend(self.out.ids());
        v
    }

    /// Decoder side given (possibly modified) encoder features.
    pub fn decode(&self, t: &mut Tape, f: EncoderFeatures, emb: NodeId) -> Result<NodeId> {
        let s1 = t.value(f.h1).spatial()?;
        let s0 = t.value(f.h0).spatial()?;
        let bottom = t.add(f.mid, f.h2)?;
        let u = t.upsample(bottom, s1)?;
        let u = t.concat(&[u, f.h1])?;
        let u2 = self.up2.apply(t, u, emb)?;
        let u = t.upsample(u2, s0)?;
        let u = t.concat(&[u, f.h0])?;
        let u1 = self.up1.apply(t, u, emb)?;
        self.out.apply(t, u1)
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId, emb: NodeId) -> Result<NodeId> {
        let f = self.encoder.forward(t, x, emb)?;
        self.decode(t, f, emb)
    }
}

/// `mean((ε − ε̂)²)` recorded on the tape.
pub fn ldm_loss_node(t: &mut Tape, eps_hat: NodeId, eps: &Grid) -> Result<NodeId> {
    if t.value(eps_hat).shape() != eps.shape() {
        return Err(Error::shape(
            "ldm_loss",
            format!("{:?} vs {:?}", t.value(eps_hat).shape(), eps.shape()),
        ));
    }
    let e = t.constant(eps.clone());
    let d = t.sub(eps_hat, e)?;
    Ok(t.mean_square(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn output_shape_matches_latent() {
        let mut rng = stream(3);
        let d = Denoiser::new(DenoiserConfig::default(), &mut rng);
        for shape in [[4, 6, 6, 3], [4, 4, 4, 4], [4, 5, 3, 1]] {
            let x = Grid::randn(&shape, &mut rng);
            assert_eq!(d.predict(&x, 7).unwrap().shape(), &shape);
        }
    }

    #[test]
    fn embedding_values() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding(3, 4);
        assert!((e.data()[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[3] - (3.0 * 0.01f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn ids_match_params() {
        let mut rng = stream(0);
        let d = Denoiser::new(DenoiserConfig::default(), &mut rng);
        let mut t = Tape::new();
        let n = d.bind(&mut t, true);
        let ids = n.ids();
        let names = d.named_params();
        assert_eq!(ids.len(), names.len());
        for (id, (_, g)) in ids.iter().zip(names) {
            assert_eq!(t.value(*id), g);
        }
    }
}

//! Mask-conditioned generation: a trainable copy of the denoiser's encoder
//! blocks joined to the frozen trunk through zero-initialised 1×1×1 convs.
//!
//! `y = F(x; θ) + Z2(F(x + Z1(c); θ'))`, where the `Z2` outputs are added to
//! the trunk's skip features and bottleneck.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ldm::schedule::NoiseSchedule;
use crate::ldm::train::{draw_diffusion_sample, fit, DiffusionSample, Posterior, TrainConfig, TrainHistory};
use crate::ldm::unet::{ldm_loss_node, Denoiser, DenoiserNodes, EncoderBlocks, EncoderFeatures, EncoderNodes};
use crate::ldm::vae::{Vae, IMAGE_CHANNELS};
use crate::ldm::ddpm_sample;
use crate::rng::stream;
use crate::tlcr::{PatchPair, Provenance};
use crate::volgrid::layers::{gather_grads, ConvNodes, Parameterized};
use crate::volgrid::{ops, Conv3d, Grid, NodeId, Tape};

/// Spatial downsampling between patch and latent grids.
pub const LATENT_FACTOR: usize = 4;

/// Binary condition at latent resolution: 4× average pooling of the label
/// channels, thresholded at 0.5.
pub fn condition_from_labels(labels: &Grid) -> Result<Grid> {
    if labels.channels() != IMAGE_CHANNELS {
        return Err(Error::shape("condition", format!("labels {:?}", labels.shape())));
    }
    let pooled = ops::avg_pool(labels, LATENT_FACTOR)?;
    Ok(pooled.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlBranch {
    /// Trainable copy of the trunk's encoder blocks.
    pub blocks: EncoderBlocks,
    /// Condition to block-input connector.
    pub z_in: Conv3d,
    /// Connectors into the trunk's `h0`, `h1`, `h2` and bottleneck.
    pub z_out: [Conv3d; 4],
}

pub struct BranchNodes {
    blocks: EncoderNodes,
    z_in: ConvNodes,
    z_out: [ConvNodes; 4],
}

/// Copies the encoder blocks of `den` and attaches all-zero connectors.
pub fn init_control_branch(den: &Denoiser) -> ControlBranch {
    let blocks = den.encoder.clone();
    let widths = blocks.widths();
    ControlBranch {
        z_in: Conv3d::zeros(IMAGE_CHANNELS, den.config.latent_channels, 1, 1, 0),
        z_out: widths.map(|w| Conv3d::zeros(w, w, 1, 1, 0)),
        blocks,
    }
}

impl ControlBranch {
    pub fn bind(&self, t: &mut Tape, trainable: bool) -> BranchNodes {
        BranchNodes {
            blocks: self.blocks.bind(t, trainable),
            z_in: self.z_in.bind(t, trainable),
            z_out: [0, 1, 2, 3].map(|i| self.z_out[i].bind(t, trainable)),
        }
    }

    /// Parameters of the connectors only.
    pub fn connector_params(&self) -> Vec<(String, &Grid)> {
        let mut v = self.z_in.named_params("z_in");
        for (i, z) in self.z_out.iter().enumerate() {
            v.extend(z.named_params(&format!("z_out{i}")));
        }
        v
    }
}

impl Parameterized for ControlBranch {
    fn named_params(&self) -> Vec<(String, &Grid)> {
        let mut v = self.blocks.named_params("copy");
        v.extend(self.connector_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Grid> {
        let mut v = self.blocks.params_mut();
        v.extend(self.z_in.params_mut());
        for z in &mut self.z_out {
            v.extend(z.params_mut());
        }
        v
    }
}

impl BranchNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = self.blocks.ids();
        v.extend(self.z_in.ids());
        for z in &self.z_out {
            v.extend(z.ids());
        }
        v
    }
}

/// Records the controlled forward pass and returns the noise estimate.
pub fn controlled_forward_nodes(
    t: &mut Tape,
    trunk: &DenoiserNodes,
    branch: &BranchNodes,
    x: NodeId,
    c: NodeId,
    emb: NodeId,
) -> Result<NodeId> {
    let f = trunk.encoder.forward(t, x, emb)?;
    let zc = branch.z_in.apply(t, c)?;
    if t.value(zc).shape() != t.value(x).shape() {
        return Err(Error::shape(
            "controlled_forward",
            format!("Z1(c) {:?} vs x {:?}", t.value(zc).shape(), t.value(x).shape()),
        ));
    }
    let xb = t.add(x, zc)?;
    let g = branch.blocks.forward(t, xb, emb)?;
    let mut join = |h: NodeId, b: NodeId, z: &ConvNodes| -> Result<NodeId> {
        let r = z.apply(t, b)?;
        t.add(h, r)
    };
    let f = EncoderFeatures {
        h0: join(f.h0, g.h0, &branch.z_out[0])?,
        h1: join(f.h1, g.h1, &branch.z_out[1])?,
        h2: join(f.h2, g.h2, &branch.z_out[2])?,
        mid: join(f.mid, g.mid, &branch.z_out[3])?,
    };
    trunk.decode(t, f, emb)
}

/// Noise estimate for latent `x` at timestep `step` under condition `c`.
pub fn controlled_forward(den: &Denoiser, branch: &ControlBranch, x: &Grid, c: &Grid, step: usize) -> Result<Grid> {
    let mut t = Tape::new();
    let trunk = den.bind(&mut t, false);
    let br = branch.bind(&mut t, false);
    let xi = t.constant(x.clone());
    let ci = t.constant(c.clone());
    let emb = den.embed(&mut t, step);
    let y = controlled_forward_nodes(&mut t, &trunk, &br, xi, ci, emb)?;
    Ok(t.value(y).clone())
}

/// `mean((ε − ε_θ(z_t, t, c))²)`.
pub fn controlnet_loss(
    den: &Denoiser,
    branch: &ControlBranch,
    schedule: &NoiseSchedule,
    z0: &Grid,
    c: &Grid,
    t: usize,
    eps: &Grid,
) -> Result<f64> {
    let zt = schedule.forward_diffuse(z0, t, eps)?;
    let pred = controlled_forward(den, branch, &zt, c, t)?;
    Ok(pred.zip_map(eps, |a, b| (a - b).powi(2))?.mean())
}

/// Conditioned training example: a posterior and its latent condition.
#[derive(Clone, Debug)]
pub struct ConditionedLatent {
    pub posterior: Posterior,
    pub condition: Grid,
}

/// Loss and branch gradients for one sample; trunk parameters are bound as
/// constants and receive nothing.
pub fn controlnet_loss_grad(
    den: &Denoiser,
    branch: &ControlBranch,
    schedule: &NoiseSchedule,
    s: &DiffusionSample,
    c: &Grid,
) -> Result<(f64, Vec<Grid>)> {
    let zt = schedule.forward_diffuse(&s.z0, s.t, &s.eps)?;
    let mut t = Tape::new();
    let trunk = den.bind(&mut t, false);
    let br = branch.bind(&mut t, true);
    let x = t.constant(zt);
    let ci = t.constant(c.clone());
    let emb = den.embed(&mut t, s.t);
    let y = controlled_forward_nodes(&mut t, &trunk, &br, x, ci, emb)?;
    let loss = ldm_loss_node(&mut t, y, &s.eps)?;
    let value = t.value(loss).item();
    let g = t.backward(loss)?;
    Ok((value, gather_grads(&g, &br.ids())))
}

/// Trains the branch with the trunk frozen.
pub fn train_controlnet(
    den: &Denoiser,
    branch: ControlBranch,
    data: &[ConditionedLatent],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ControlBranch, TrainHistory)> {
    fit(
        branch,
        data.len(),
        cfg,
        seed,
        |i, rng| draw_diffusion_sample(i, &data[i].posterior, schedule, rng),
        |branch, s| controlnet_loss_grad(den, branch, schedule, s, &data[s.index].condition),
    )
}

/// Everything needed to synthesise patches for one fold.
pub struct Generator<'a> {
    pub vae: &'a Vae,
    pub denoiser: &'a Denoiser,
    pub branch: &'a ControlBranch,
    pub schedule: &'a NoiseSchedule,
    /// Multiplier applied to encoder latents before diffusion.
    pub latent_scale: f64,
}

impl Generator<'_> {
    /// Samples a latent under the donor's mask, decodes it, clamps to the
    /// normalised intensity range and re-applies the donor masks.
    pub fn generate(&self, donor: &PatchPair, rng: &mut ChaCha8Rng) -> Result<PatchPair> {
        let c = condition_from_labels(&donor.labels)?;
        let [x, y, z] = donor.spatial();
        let shape = [self.denoiser.config.latent_channels, x / LATENT_FACTOR, y / LATENT_FACTOR, z / LATENT_FACTOR];
        let latent = ddpm_sample(self.schedule, &shape, rng, |zt, t| {
            controlled_forward(self.denoiser, self.branch, zt, &c, t)
        })?;
        let inv = 1.0 / self.latent_scale;
        let image = self.vae.decode(&latent.map(|v| v * inv))?;
        let mut out = PatchPair {
            image: image.map(|v| v.clamp(0.0, 1.0)),
            labels: donor.labels.clone(),
            provenance: Provenance::Synthetic,
            pni: donor.pni,
        };
        out.remask();
        Ok(out)
    }

    pub fn generate_seeded(&self, donor: &PatchPair, seed: u64) -> Result<PatchPair> {
        self.generate(donor, &mut stream(seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldm::unet::DenoiserConfig;
    use crate::ldm::vae::VaeConfig;
    use crate::tlcr::CropSpec;

    fn trunk() -> Denoiser {
        Denoiser::new(DenoiserConfig::default(), &mut stream(11))
    }

    #[test]
    fn init_is_exact_copy_with_zero_connectors() {
        let den = trunk();
        let b = init_control_branch(&den);
        assert!(b.connector_params().iter().all(|(_, g)| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(b.blocks, den.encoder);
        let copied: usize = den.encoder.named_params("e").iter().map(|(_, g)| g.len()).sum();
        let zs: usize = b.connector_params().iter().map(|(_, g)| g.len()).sum();
        assert_eq!(b.param_count(), copied + zs);
    }

    #[test]
    fn zero_init_identity_and_sensitivity() {
        let den = trunk();
        let mut b = init_control_branch(&den);
        let mut rng = stream(3);
        let x = Grid::randn(&[4, 6, 6, 3], &mut rng);
        let c = Grid::uniform(&[2, 6, 6, 3], 0.0, 1.0, &mut rng).map(|v| v.round());
        let base = den.predict(&x, 9).unwrap();
        assert_eq!(controlled_forward(&den, &b, &x, &c, 9).unwrap(), base);
        b.z_out[1].bias.data_mut()[0] = 0.3;
        assert_ne!(controlled_forward(&den, &b, &x, &c, 9).unwrap(), base);
        let bad = Grid::zeros(&[2, 5, 6, 3]);
        assert!(controlled_forward(&den, &b, &x, &bad, 9).is_err());
    }

    #[test]
    fn trunk_gets_no_gradient_and_loss_matches_unconditioned() {
        let den = trunk();
        let b = init_control_branch(&den);
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng = stream(4);
        let z0 = Grid::randn(&[4, 3, 3, 2], &mut rng);
        let eps = Grid::randn(&[4, 3, 3, 2], &mut rng);
        let c = Grid::full(&[2, 3, 3, 2], 1.0);
        let a = controlnet_loss(&den, &b, &s, &z0, &c, 4, &eps).unwrap();
        assert_eq!(a, crate::ldm::ldm_loss(&den, &s, &z0, 4, &eps).unwrap());

        let zt = s.forward_diffuse(&z0, 4, &eps).unwrap();
        let mut t = Tape::new();
        let tn = den.bind(&mut t, true);
        let bn = b.bind(&mut t, true);
        let x = t.constant(zt);
        let ci = t.constant(c);
        let emb = den.embed(&mut t, 4);
        let y = controlled_forward_nodes(&mut t, &tn, &bn, x, ci, emb).unwrap();
        let l = ldm_loss_node(&mut t, y, &eps).unwrap();
        let g = t.backward(l).unwrap();
        // with zero connectors only Z2 sees a gradient inside the branch,
        // while the trunk still would if it were trainable
        let z2: f64 = bn.z_out.iter().map(|z| g.wrt(z.ids()[0]).data().iter().map(|v| v.abs()).sum::<f64>()).sum();
        assert!(z2 > 0.0);

        let ds = DiffusionSample { index: 0, z0, t: 4, eps };
        let before = den.checksum();
        let (_, grads) = controlnet_loss_grad(&den, &b, &s, &ds, &Grid::full(&[2, 3, 3, 2], 1.0)).unwrap();
        assert_eq!(grads.len(), b.named_params().len());
        assert_eq!(den.checksum(), before);
    }

    #[test]
    fn condition_is_binary_and_nested() {
        let mut labels = Grid::zeros(&[2, 8, 8, 4]);
        let n = 8 * 8 * 4;
        for i in 0..n {
            let x = i / 32;
            if x < 6 {
                labels.data_mut()[i] = 1.0;
            }
            if x < 3 {
                labels.data_mut()[n + i] = 1.0;
            }
        }
        let c = condition_from_labels(&labels).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2, 1]);
        assert!(c.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let m = c.len() / 2;
        assert!((0..m).all(|i| c.data()[m + i] <= c.data()[i]));
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let mut rng = stream(6);
        let vae = Vae::new(VaeConfig::default(), &mut rng);
        let den = trunk();
        let mut branch = init_control_branch(&den);
        branch.z_in.kernel.data_mut().fill(0.1);
        let s = NoiseSchedule::linear(5, 1e-3, 0.05).unwrap();
        let mut donor = PatchPair::zeros(CropSpec::new([8, 8, 4]).unwrap(), 1, Provenance::Real);
        let n = 8 * 8 * 4;
        for i in 0..n / 2 {
            donor.labels.data_mut()[i] = 1.0;
            donor.image.data_mut()[i] = 0.5;
        }
        let g = Generator {
            vae: &vae,
            denoiser: &den,
            branch: &branch,
            schedule: &s,
            latent_scale: 2.0,
        };
        let a = g.generate_seeded(&donor, 42).unwrap();
        let b = g.generate_seeded(&donor, 42).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.pni, 1);
        assert_eq!(a.provenance, Provenance::Synthetic);
    }
}

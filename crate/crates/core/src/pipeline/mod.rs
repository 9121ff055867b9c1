//! Run configuration and the cross-validated augmentation experiment.

pub mod experiment;
pub mod report;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{PhantomConfig, MIN_PHANTOM_DIM};
use crate::error::{Error, Result};
use crate::ldm::{DenoiserConfig, NoiseSchedule, TrainConfig, VaeConfig};
use crate::pattennet::{ClassifierConfig, ClassifierTrainConfig};
use crate::tlcr::CropSpec;

pub use experiment::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Every tunable of a run. Defaults follow the published training setup;
/// [`RunConfig::desk`] scales it down for a single CPU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Phantom volume extents.
    pub dims: [usize; 3],
    pub crop: [usize; 3],
    pub n_pos: usize,
    pub n_neg: usize,
    pub folds: usize,
    /// Drop cases whose tumor exceeds this fraction of the liver region.
    pub max_tumor_fraction: Option<f64>,
    pub phantom: PhantomConfig,
    pub schedule: ScheduleConfig,
    pub vae: VaeConfig,
    pub vae_train: TrainConfig,
    pub denoiser: DenoiserConfig,
    pub ldm_train: TrainConfig,
    pub controlnet_train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: ClassifierTrainConfig,
    /// Fractions of the per-fold class deficit filled with synthetic cases.
    pub ratios: Vec<f64>,
    /// Classifier variants trained for one epoch in the ablation report.
    pub ablations: Vec<ClassifierConfig>,
    /// Synthetic-set intensity shift used by the FID sanity comparison.
    pub fid_shift: f64,
    pub output_dir: String,
}

fn ablation_matrix() -> Vec<ClassifierConfig> {
    let mut v: Vec<ClassifierConfig> = (0..=3)
        .map(|k| ClassifierConfig {
            dab_count: k,
            ..Default::default()
        })
        .collect();
    v.push(ClassifierConfig {
        channel_only: true,
        ..Default::default()
    });
    v.push(ClassifierConfig {
        spatial_only: true,
        ..Default::default()
    });
    v
}

/// Optimiser steps covering `epochs` passes over `n` samples.
fn epoch_steps(epochs: usize, n: usize, batch: usize) -> usize {
    epochs * n.div_ceil(batch)
}

impl Default for RunConfig {
    fn default() -> Self {
        // 128 cases, four fifths in each training split
        let n_train = 102;
        RunConfig {
            seed: 0,
            dims: [128, 128, 64],
            crop: CropSpec::PAPER.size,
            n_pos: 44,
            n_neg: 84,
            folds: 5,
            max_tumor_fraction: None,
            phantom: PhantomConfig::default(),
            schedule: ScheduleConfig::default(),
            vae: VaeConfig::default(),
            vae_train: TrainConfig {
                steps: epoch_steps(6000, n_train, 4),
                batch_size: 4,
                lr: 1e-6,
                weight_decay: 0.0,
                checkpoint_every: 100,
            },
            denoiser: DenoiserConfig::default(),
            ldm_train: TrainConfig {
                steps: epoch_steps(6000, n_train, 4),
                batch_size: 4,
                lr: 1e-5,
                weight_decay: 0.0,
                checkpoint_every: 100,
            },
            controlnet_train: TrainConfig {
                steps: epoch_steps(3000, n_train, 8),
                batch_size: 8,
                lr: 1e-5,
                weight_decay: 0.0,
                checkpoint_every: 100,
            },
            classifier: ClassifierConfig::default(),
            classifier_train: ClassifierTrainConfig::default(),
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            ablations: ablation_matrix(),
            fid_shift: 0.2,
            output_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    /// Single-CPU preset: 11/21 cohort, 24×24×12 patches, 50 diffusion steps
    /// and a few hundred optimiser steps per stage.
    pub fn desk() -> Self {
        RunConfig {
            dims: [40, 40, 20],
            crop: CropSpec::DESK.size,
            n_pos: 11,
            n_neg: 21,
            schedule: ScheduleConfig {
                steps: 50,
                beta_start: 1e-4,
                beta_end: 0.2,
            },
            vae_train: TrainConfig {
                steps: 300,
                batch_size: 4,
                lr: 3e-3,
                weight_decay: 0.0,
                checkpoint_every: 25,
            },
            ldm_train: TrainConfig {
                steps: 300,
                batch_size: 4,
                lr: 2e-3,
                weight_decay: 0.0,
                checkpoint_every: 25,
            },
            controlnet_train: TrainConfig {
                steps: 200,
                batch_size: 4,
                lr: 1e-3,
                weight_decay: 0.0,
                checkpoint_every: 25,
            },
            classifier_train: ClassifierTrainConfig {
                max_epochs: 50,
                patience: 20,
                batch_size: 4,
                lr: 3e-2,
                weight_decay: 0.0,
            },
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    /// Parses TOML over the given base; absent keys keep the base values.
    pub fn from_toml(text: &str, base: &RunConfig) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(json))
    }

    pub fn crop_spec(&self) -> Result<CropSpec> {
        CropSpec::new(self.crop)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
            return bad(format!("dims {:?}: every extent must be at least {MIN_PHANTOM_DIM}", self.dims));
        }
        self.crop_spec()?;
        if self.crop.iter().any(|c| c % 4 != 0) {
            return bad(format!("crop {:?}: every extent must be divisible by 4", self.crop));
        }
        if self.folds < 2 {
            return bad(format!("folds = {}: need at least 2", self.folds));
        }
        if self.n_pos < self.folds || self.n_neg < self.folds {
            return bad(format!(
                "cohort {}/{} too small for {} folds",
                self.n_pos, self.n_neg, self.folds
            ));
        }
        if self.n_neg < self.n_pos {
            return bad("n_neg must be at least n_pos (positives are the minority class)".into());
        }
        if let Some(f) = self.max_tumor_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("max_tumor_fraction {f} outside (0, 1]"));
            }
        }
        self.phantom.validate()?;
        self.schedule.build()?;
        if self.vae.latent_channels == 0 || self.vae.widths.contains(&0) {
            return bad("vae widths and latent_channels must be positive".into());
        }
        if !(self.vae.kl_weight >= 0.0 && self.vae.kl_weight.is_finite()) {
            return bad("vae.kl_weight must be finite and nonnegative".into());
        }
        if self.denoiser.latent_channels != self.vae.latent_channels {
            return bad("denoiser.latent_channels must equal vae.latent_channels".into());
        }
        if self.denoiser.widths.contains(&0) || self.denoiser.time_dim < 2 || !self.denoiser.time_dim.is_multiple_of(2) {
            return bad("denoiser widths must be positive and time_dim an even number of at least 2".into());
        }
        self.vae_train.validate("vae_train")?;
        self.ldm_train.validate("ldm_train")?;
        self.controlnet_train.validate("controlnet_train")?;
        self.classifier.validate()?;
        self.classifier_train.validate()?;
        for a in &self.ablations {
            a.validate()?;
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("ratios must be a nonempty list of values in [0, 1]".into());
        }
        if self.ratios.windows(2).any(|w| w[1] <= w[0]) {
            return bad("ratios must be strictly increasing".into());
        }
        if !self.fid_shift.is_finite() {
            return bad("fid_shift must be finite".into());
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

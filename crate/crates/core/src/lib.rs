//! Tumor-localized 3D patch extraction, mask-conditioned latent diffusion
//! for minority-class augmentation, and a dual-attention patch classifier.
//!
//! The crate is organised bottom-up:
//!
//! - [`volgrid`]: dense grids, reverse-mode tape, gradient checking, AdamW.
//! - [`nifti`]: NIfTI-1 I/O and intensity/label preprocessing.
//! - [`tlcr`]: tumor bounding box, fixed-size crop and dual-channel patches.
//! - [`ldm`]: VAE, noise schedule, latent U-Net denoiser, DDPM sampling.
//! - [`controlnet`]: zero-initialised control branch and conditioned sampling.
//! - [`pattennet`]: dual attention blocks on frozen encoder features.
//! - [`metrics`]: Dice, PSNR, SSIM, slice-wise Fréchet distance, ROC AUC.
//! - [`cohort`]: phantom cohorts, stratified folds, balancing ladder.
//! - [`pipeline`]: configuration and the cross-validation experiment.

pub mod cohort;
pub mod controlnet;
pub mod error;
pub mod ldm;
pub mod metrics;
pub mod nifti;
pub mod pattennet;
pub mod pipeline;
pub mod rng;
pub mod tlcr;
pub mod volgrid;

pub use error::{Error, Result};
pub use volgrid::{Grid, NodeId, Tape};

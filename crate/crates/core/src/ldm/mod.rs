//! Latent diffusion: autoencoder, noise schedule, denoiser, training and
//! sampling.

pub mod checkpoint;
pub mod schedule;
pub mod train;
pub mod unet;
pub mod vae;

pub use checkpoint::Checkpoint;
pub use schedule::NoiseSchedule;
pub use train::{
    ddpm_sample, ldm_loss, latent_scale, train_denoiser, train_vae, Posterior, TrainConfig, TrainHistory,
};
pub use unet::{Denoiser, DenoiserConfig};
pub use vae::{vae_loss, Vae, VaeConfig};

//! Diffusion-guided autoencoder (DGAE) at desk scale.
//!
//! A convolutional VAE encoder is paired with a conditional velocity U-Net that
//! reconstructs images by denoising from Gaussian noise, trained with a
//! denoising objective plus a perceptual loss. A GAN-guided VAE with a
//! Gaussian decoder serves as the baseline. The crate contains everything
//! needed to train, sample, and evaluate both on a procedural image dataset:
//!
//! - [`data`]: procedural dataset, augmentation, PPM/PGM I/O
//! - [`nets`]: encoder, U-Net, Gaussian decoder, PatchGAN discriminator, feature net
//! - [`losses`]: KL, L2, velocity DSM, perceptual, hinge GAN, weighted totals
//! - [`diffusion`]: forward noising, single-step prediction, Euler sampler
//! - [`training`]: AdamW, schedules, clipping, training loops, checkpoints
//! - [`metrics`]: PSNR, SSIM, Fréchet feature distance, latent smoothness, PCA
//! - [`config`] and [`sweep`]: run configuration and experiment drivers
//!
//! All numerics sit on a small reverse-mode autodiff engine in [`autograd`].

pub mod autograd;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, Var};
pub use config::{ModelKind, RunConfig};
pub use data::{Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use nets::{LatentPosterior, ModelParams};
pub use tensor::{Float, Tensor};

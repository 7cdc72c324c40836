//! Q-space up-sampling of diffusion-weighted images.
//!
//! A low angular resolution acquisition is completed to a dense gradient
//! scheme by generating the missing directions slice by slice. Generation
//! uses a conditional denoising diffusion model whose U-Net attends to the
//! gradient directions of the target and its nearest acquired references.
//! Linear interpolation and a conditional GAN are provided as baselines, and
//! results are scored with SSIM and tensor-derived FA maps.

// Validation uses `!(x > 0.0)` style tests so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod qspace;
pub mod registry;
pub mod rng;
pub mod tensorfit;
pub mod volume;

pub use error::{Error, Result};

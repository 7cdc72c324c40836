//! A small reverse-mode autodiff engine for the convolutional networks used
//! by the up-sampling models: im2col convolutions, group normalisation,
//! per-pixel cross-attention and the handful of losses the trainers need.
//!
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, GroupNorm, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

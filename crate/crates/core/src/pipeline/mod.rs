//! Dataset construction, training, volume completion and evaluation.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod methods;
pub mod normalize;
pub mod train;
pub mod upsample;

//! Up-sampling methods behind a common interface, looked up by name.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::diffusion::ConditioningSample;
use crate::error::{Error, Result};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::methods::{CganMethod, DiffusionMethod, InterpMethod};
use crate::qspace::Vec3;
use crate::volume::DwiSlice;

/// One slice to generate from raw (unnormalised) reference slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRequest {
    pub target: Vec3,
    /// Reference directions, nearest first.
    pub directions: Vec<Vec3>,
    pub references: Vec<DwiSlice>,
    pub seed: u64,
}

impl SliceRequest {
    /// The gradient matrix: the target row followed by the reference rows.
    pub fn bmatrix(&self) -> Vec<Vec3> {
        std::iter::once(self.target).chain(self.directions.iter().copied()).collect()
    }

    /// The request matching a conditioning sample, ignoring its target.
    pub fn from_sample(sample: &ConditioningSample, seed: u64) -> Self {
        Self {
            target: sample.bmatrix[0],
            directions: sample.bmatrix[1..].to_vec(),
            references: sample.references.clone(),
            seed,
        }
    }
}

/// Produces target slices in the intensity units of the references. Output
/// masking is left to the caller.
pub trait Upsampler {
    fn method(&self) -> &str;
    fn references(&self) -> usize;
    fn generate(&self, requests: &[SliceRequest]) -> Result<Vec<DwiSlice>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub loss: f64,
    pub discriminator_loss: Option<f64>,
}

/// Optimisation state of one training run.
pub trait Trainer {
    /// One update on an already augmented batch. All randomness comes from
    /// `rng`, which the caller keys by step so that resumed runs repeat.
    fn train_step(&mut self, batch: &[&ConditioningSample], rng: &mut dyn RngCore) -> Result<StepLosses>;
    fn steps_done(&self) -> u64;
    /// A generator with the current weights.
    fn upsampler(&self) -> Box<dyn Upsampler>;
    fn checkpoint(&self, config: &TrainConfig) -> Checkpoint;
}

/// Where an up-sampler gets its model from.
#[derive(Clone, Copy, Debug)]
pub enum ModelSource<'a> {
    Checkpoint(&'a Checkpoint),
    /// Methods without learned weights only need the reference count.
    Untrained { references: usize },
}

pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn trainable(&self) -> bool;
    /// A fresh trainer for a resolved config.
    fn trainer(&self, config: &TrainConfig) -> Result<Box<dyn Trainer>>;
    /// A trainer continuing from a checkpoint of this method.
    fn resume(&self, checkpoint: &Checkpoint) -> Result<Box<dyn Trainer>>;
    fn upsampler(&self, source: ModelSource<'_>) -> Result<Box<dyn Upsampler>>;
}

#[derive(Default)]
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn Method>>,
}

impl MethodRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Diffusion, cGAN and interpolation.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        r.register(Box::new(DiffusionMethod));
        r.register(Box::new(CganMethod));
        r.register(Box::new(InterpMethod::default()));
        r
    }

    /// Adds a method, replacing any method registered under the same name.
    pub fn register(&mut self, method: Box<dyn Method>) -> Option<Box<dyn Method>> {
        self.methods.insert(method.name(), method)
    }

    pub fn get(&self, name: &str) -> Result<&dyn Method> {
        self.methods.get(name).map(|m| m.as_ref()).ok_or_else(|| Error::UnknownMethod {
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Method> {
        self.methods.values().map(|m| m.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_methods_are_registered_by_name() {
        let r = MethodRegistry::builtin();
        assert_eq!(r.names(), vec!["cgan", "diffusion", "interp"]);
        assert!(r.get("diffusion").unwrap().trainable());
        assert!(!r.get("interp").unwrap().trainable());
        let err = r.get("qgan").err().unwrap().to_string();
        assert!(err.contains("qgan") && err.contains("diffusion"), "{err}");
    }

    #[test]
    fn registering_a_name_again_replaces_it() {
        let mut r = MethodRegistry::builtin();
        assert!(r.register(Box::new(InterpMethod::default())).is_some());
        assert_eq!(r.iter().count(), 3);
    }
}

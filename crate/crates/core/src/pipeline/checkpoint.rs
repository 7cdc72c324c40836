//! Self-contained JSON checkpoints: resolved config, noise schedule,
//! weights and optimiser state.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use qup_nn::{Adam, AdamConfig, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleParams;
use crate::error::{io_err, Error, Result};
use crate::pipeline::config::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "qup-checkpoint-v1";

/// A named tensor stored as base64 little-endian `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl StoredTensor {
    pub fn encode(name: &str, t: &Tensor<f32>) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { name: name.into(), shape: t.shape().to_vec(), data: B64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Tensor<f32>> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", self.name)))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("tensor {}: {} bytes is not a whole number of f32", self.name, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::new(&self.shape, data).map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", self.name)))
    }
}

pub fn encode_store(store: &ParamStore<f32>) -> Vec<StoredTensor> {
    store.iter().map(|(_, name, t)| StoredTensor::encode(name, t)).collect()
}

pub fn decode_store(tensors: &[StoredTensor]) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for t in tensors {
        store.add(t.name.clone(), t.decode()?);
    }
    Ok(store)
}

/// Adam moments, keyed by the parameter names of the store they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredOptimizer {
    pub steps: u64,
    pub m: Vec<StoredTensor>,
    pub v: Vec<StoredTensor>,
}

impl StoredOptimizer {
    pub fn encode(opt: &Adam<f32>, store: &ParamStore<f32>) -> Self {
        let (m, v) = opt.moments();
        let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
        let enc = |ts: &[Tensor<f32>]| ts.iter().zip(&names).map(|(t, n)| StoredTensor::encode(n, t)).collect();
        Self { steps: opt.steps(), m: enc(m), v: enc(v) }
    }

    pub fn decode(&self, config: AdamConfig, store: &ParamStore<f32>) -> Result<Adam<f32>> {
        let dec = |ts: &[StoredTensor]| ts.iter().map(StoredTensor::decode).collect::<Result<Vec<_>>>();
        Adam::from_state(config, self.steps, dec(&self.m)?, dec(&self.v)?, store).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub method: String,
    /// Completed training steps.
    pub step: u64,
    /// The resolved training configuration, including the network layout.
    pub config: TrainConfig,
    /// Present for methods that sample through a noise schedule, so that
    /// generation never depends on configuration outside the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleParams>,
    pub weights: Vec<StoredTensor>,
    /// Running average of the weights, used for sampling when present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ema_weights: Vec<StoredTensor>,
    pub optimizers: BTreeMap<String, StoredOptimizer>,
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("{}: unknown checkpoint format '{}'", path.display(), c.format)));
        }
        Ok(c)
    }

    pub fn optimizer(&self, name: &str) -> Result<&StoredOptimizer> {
        self.optimizers
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no '{name}' optimizer state")))
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_round_trip_bit_exactly() {
        let t = Tensor::new(&[2, 3], vec![0.0, -1.5, f32::MIN_POSITIVE, 3.25e-7, f32::MAX, 1.0 / 3.0]).unwrap();
        let s = StoredTensor::encode("w", &t);
        assert_eq!(s.decode().unwrap(), t);
        let bad = StoredTensor { data: "AAA=".into(), ..s };
        assert!(bad.decode().is_err());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap());
        store.add("b", Tensor::new(&[1], vec![3.0f32]).unwrap());
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg, &store);
        opt.step(&mut store, &[Some(Tensor::new(&[2], vec![0.5, -0.5]).unwrap()), None]);
        let restored = StoredOptimizer::encode(&opt, &store).decode(cfg, &store).unwrap();
        assert_eq!(restored, opt);
        assert_eq!(decode_store(&encode_store(&store)).unwrap(), store);
    }
}

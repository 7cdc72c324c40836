//! Training configuration files.

use std::path::Path;

use qup_nn::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::baselines::cgan::GanConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleParams;
use crate::error::{io_err, Error, Result};
use crate::pipeline::augment::AugmentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Everything a training run needs besides the data. Every field has a
/// desk-scale default, so a config file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Method name; the command line may set it instead.
    pub method: Option<String>,
    pub seed: u64,
    /// Total optimisation steps (generator steps for the cGAN).
    pub steps: u64,
    pub batch_size: usize,
    /// Optimiser of the diffusion denoiser.
    pub optimizer: OptimizerConfig,
    /// Decay of the running weight average that diffusion sampling uses;
    /// 0 samples with the raw weights.
    pub ema_decay: f64,
    /// Network preset used when `denoiser` is absent.
    pub preset: String,
    /// Explicit network layout; its reference count must match the manifest.
    pub denoiser: Option<DenoiserConfig>,
    pub schedule: ScheduleParams,
    /// Losses, discriminator and optimiser of the cGAN baseline.
    pub gan: GanConfig,
    pub augment: AugmentConfig,
    /// Restricts training to the first this-many training samples.
    pub max_train_samples: Option<usize>,
    /// Validation SSIM every this-many steps (0 disables it).
    pub validate_every: u64,
    pub validation_samples: usize,
    /// Checkpoint every this-many steps (0 writes only the final one).
    pub checkpoint_every: u64,
    /// Progress log line every this-many steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: None,
            seed: 0,
            steps: 2000,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            ema_decay: 0.999,
            preset: "desk".into(),
            denoiser: None,
            schedule: ScheduleParams::default(),
            gan: GanConfig::default(),
            augment: AugmentConfig::default(),
            max_train_samples: None,
            validate_every: 0,
            validation_samples: 4,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// The large-scale settings: wide network, `lr = 2.5e-5`, `β1 = 0.5`.
    pub fn full() -> Self {
        Self {
            preset: "full".into(),
            optimizer: OptimizerConfig { lr: 2.5e-5, beta1: 0.5, beta2: 0.999, eps: 1e-8 },
            gan: GanConfig { discriminator: crate::baselines::cgan::DiscriminatorConfig::full(), ..GanConfig::default() },
            ..Self::default()
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    /// Fixes the method and network layout for a manifest with `references`
    /// references per target, rejecting inconsistent settings.
    pub fn resolve(&self, method: Option<&str>, references: usize) -> Result<Self> {
        let mut out = self.clone();
        match (method, &self.method) {
            (Some(m), Some(c)) if m != c => {
                return Err(Error::Config(format!("method '{m}' conflicts with config method '{c}'")));
            }
            (Some(m), _) => out.method = Some(m.to_string()),
            (None, Some(_)) => {}
            (None, None) => return Err(Error::Config("no method given".into())),
        }
        let denoiser = match &self.denoiser {
            Some(d) if d.references != references => {
                return Err(Error::Config(format!(
                    "denoiser expects R={} references but the manifest has R={references}",
                    d.references
                )))
            }
            Some(d) => d.clone(),
            None => DenoiserConfig::preset(&self.preset, references)?,
        };
        denoiser.validate()?;
        out.denoiser = Some(denoiser);
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", self.optimizer.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        self.gan.validate()?;
        self.augment.validate()?;
        crate::diffusion::NoiseSchedule::from_params(&self.schedule)?;
        Ok(out)
    }

    pub fn method_name(&self) -> Result<&str> {
        self.method.as_deref().ok_or_else(|| Error::Config("no method given".into()))
    }

    /// The network layout of a resolved config.
    pub fn network(&self) -> Result<&DenoiserConfig> {
        self.denoiser.as_ref().ok_or_else(|| Error::Config("config is not resolved: no denoiser layout".into()))
    }
}

//! The training loop shared by the trainable methods.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::Rng;

use crate::diffusion::ConditioningSample;
use crate::error::{io_err, Error, Result};
use crate::metrics::ssim;
use crate::pipeline::augment::augment;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::dataset::{DatasetManifest, Split};
use crate::registry::{Method, SliceRequest, StepLosses, Trainer};
use crate::rng::{derive_seed, keyed_rng};

const STEP_STREAM: u64 = 0x7a1e;
const VALIDATION_STREAM: u64 = 0x5a1d;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub discriminator_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRecord {
    pub step: u64,
    pub ssim: f64,
}

/// Progress reported to the caller while training.
#[derive(Clone, Debug)]
pub enum TrainEvent<'a> {
    Step(LossRecord),
    Validation(ValidationRecord),
    Checkpoint(&'a Checkpoint),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
    pub validation: Vec<ValidationRecord>,
}

/// Mean of each value and up to `window - 1` values before it.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Mean SSIM of generated against true validation slices. Each slice is
/// compared over its non-zero pixels with the data range of the true slice.
pub fn validation_ssim(trainer: &dyn Trainer, samples: &[ConditioningSample], seed: u64) -> Result<f64> {
    let up = trainer.upsampler();
    let requests: Vec<SliceRequest> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| SliceRequest::from_sample(s, derive_seed(seed, &[VALIDATION_STREAM, i as u64])))
        .collect();
    let generated = up.generate(&requests)?;
    let mut scores = Vec::new();
    for (g, s) in generated.iter().zip(samples) {
        if let Some(v) = slice_ssim(&g.pixels, &s.target.pixels, s.target.height, s.target.width)? {
            scores.push(v);
        }
    }
    if scores.is_empty() {
        return Err(Error::Validation("no validation slice could be scored".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// SSIM of `pred` against `truth` over the non-zero pixels of `truth` with
/// the truth's data range, or `None` when the slice cannot be scored.
pub fn slice_ssim(pred: &[f64], truth: &[f64], height: usize, width: usize) -> Result<Option<f64>> {
    let max = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let mask: Vec<bool> = truth.iter().map(|&v| v != 0.0).collect();
    if !(max > min) {
        return Ok(None);
    }
    match ssim(pred, truth, height, width, max - min, Some(&mask)) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Validation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs `config.steps` updates over `train`, starting from `resume` when
/// given. Step `k` always draws its batch, augmentation and noise from the
/// stream keyed by `(seed, k)`, so a resumed run repeats the losses of an
/// uninterrupted one.
pub fn train_samples(
    method: &dyn Method,
    config: &TrainConfig,
    train: &[ConditioningSample],
    validation: &[ConditioningSample],
    resume: Option<&Checkpoint>,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let r = config.network()?.references;
    if let Some(s) = train.iter().chain(validation).find(|s| s.num_references() != r) {
        return Err(Error::Config(format!("config expects R={r} references but a sample has {}", s.num_references())));
    }
    let mut trainer = match resume {
        Some(c) => {
            if c.config.network()? != config.network()? {
                return Err(Error::Config("resume checkpoint has a different network layout".into()));
            }
            method.resume(c)?
        }
        None => method.trainer(config)?,
    };
    let pool = &train[..config.max_train_samples.map_or(train.len(), |m| m.clamp(1, train.len()))];
    let val = &validation[..config.validation_samples.min(validation.len())];
    let mut losses = Vec::new();
    let mut validations = Vec::new();
    let mut last_ckpt: Option<Checkpoint> = None;

    for step in trainer.steps_done() + 1..=config.steps {
        let mut rng = keyed_rng(config.seed, &[STEP_STREAM, step]);
        let batch: Vec<ConditioningSample> = (0..config.batch_size)
            .map(|_| augment(&pool[rng.random_range(0..pool.len())], &config.augment, &mut rng).0)
            .collect();
        let refs: Vec<&ConditioningSample> = batch.iter().collect();
        let StepLosses { loss, discriminator_loss } = trainer.train_step(&refs, &mut rng)?;
        let rec = LossRecord { step, loss, discriminator_loss };
        losses.push(rec);
        on_event(TrainEvent::Step(rec))?;
        if config.log_every > 0 && step % config.log_every == 0 {
            info!("step {step}/{}: loss {loss:.5}", config.steps);
        }
        if config.validate_every > 0 && step % config.validate_every == 0 && !val.is_empty() {
            let v = ValidationRecord { step, ssim: validation_ssim(trainer.as_ref(), val, config.seed)? };
            info!("step {step}: validation SSIM {:.4}", v.ssim);
            validations.push(v);
            on_event(TrainEvent::Validation(v))?;
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.steps {
            let c = trainer.checkpoint(config);
            on_event(TrainEvent::Checkpoint(&c))?;
            last_ckpt = Some(c);
        }
    }
    let checkpoint = trainer.checkpoint(config);
    if last_ckpt.as_ref().is_none_or(|c| c.step != checkpoint.step) {
        on_event(TrainEvent::Checkpoint(&checkpoint))?;
    }
    Ok(TrainOutcome { checkpoint, losses, validation: validations })
}

/// Files written by [`train_to_dir`].
pub struct TrainFiles {
    pub dir: PathBuf,
}

impl TrainFiles {
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn validation_log(&self) -> PathBuf {
        self.dir.join("validation.csv")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.dir.join("config.resolved.json")
    }

    /// The most recent checkpoint.
    pub fn latest(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }

    pub fn at_step(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{step:07}.json"))
    }
}

/// Opens a CSV log. When resuming from `resume_step`, rows after that step
/// are dropped and new rows are appended; otherwise the log starts afresh.
fn open_log(path: &Path, header: &str, resume_step: Option<u64>) -> Result<File> {
    let kept = match resume_step {
        Some(step) if path.exists() => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let rows: Vec<&str> = text
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
                .collect();
            rows.join("\n")
        }
        _ => String::new(),
    };
    let mut f = File::create(path).map_err(io_err(path))?;
    writeln!(f, "{header}").map_err(io_err(path))?;
    if !kept.is_empty() {
        writeln!(f, "{kept}").map_err(io_err(path))?;
    }
    Ok(f)
}

/// Trains on the manifest's train split, validates on its val split and
/// writes logs, the resolved config and checkpoints into `out`.
pub fn train_to_dir(
    manifest: &DatasetManifest,
    method: &dyn Method,
    config: &TrainConfig,
    out: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if !method.trainable() {
        return Err(Error::Config(format!("method '{}' is not trainable", method.name())));
    }
    if manifest.subjects_in(Split::Train).next().is_none() {
        return Err(Error::Validation("manifest has no training subjects".into()));
    }
    let config = config.resolve(Some(method.name()), manifest.references())?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let files = TrainFiles { dir: out.to_path_buf() };
    config.write(&files.resolved_config())?;
    let train = manifest.load_split(Split::Train)?;
    let val = if config.validate_every > 0 { manifest.load_split(Split::Val)? } else { Vec::new() };
    info!("training {} on {} samples ({} validation)", method.name(), train.len(), val.len());

    let mut loss_log = open_log(&files.loss_log(), "step,loss,discriminator_loss", resume.map(|c| c.step))?;
    let mut val_log = open_log(&files.validation_log(), "step,ssim", resume.map(|c| c.step))?;
    let loss_path = files.loss_log();
    let val_path = files.validation_log();
    let mut on_event = |e: TrainEvent<'_>| -> Result<()> {
        match e {
            TrainEvent::Step(r) => {
                let d = r.discriminator_loss.map_or(String::new(), |d| d.to_string());
                writeln!(loss_log, "{},{},{}", r.step, r.loss, d).map_err(io_err(&loss_path))
            }
            TrainEvent::Validation(v) => writeln!(val_log, "{},{}", v.step, v.ssim).map_err(io_err(&val_path)),
            TrainEvent::Checkpoint(c) => {
                c.write(&files.at_step(c.step))?;
                c.write(&files.latest())
            }
        }
    };
    train_samples(method, &config, &train, &val, resume, &mut on_event)
}

/// Reads a loss log written by [`train_to_dir`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse(format!("{}: bad loss line '{line}'", path.display()));
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(LossRecord {
                step: parts[0].parse().map_err(|_| bad())?,
                loss: parts[1].parse().map_err(|_| bad())?,
                discriminator_loss: if parts[2].is_empty() { None } else { Some(parts[2].parse().map_err(|_| bad())?) },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_is_a_trailing_mean() {
        let s = smoothed(&[1.0, 3.0, 5.0, 7.0], 2);
        assert_eq!(s, vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smoothed(&[2.0, 4.0], 10), vec![2.0, 3.0]);
        assert!(smoothed(&[], 3).is_empty());
    }

    #[test]
    fn slice_ssim_skips_unscorable_slices() {
        let img: Vec<f64> = (0..64).map(|i| (i % 8) as f64).collect();
        assert!((slice_ssim(&img, &img, 8, 8).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(slice_ssim(&img, &vec![2.0; 64], 8, 8).unwrap(), None);
    }
}

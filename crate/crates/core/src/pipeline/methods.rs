//! The built-in methods: conditional diffusion, the cGAN baseline and
//! gradient-space interpolation.

use std::collections::BTreeMap;

use qup_nn::{Adam, Graph, ParamStore, Tensor};
use rand::RngCore;

use crate::baselines::cgan::{CganModel, CganTrainer};
use crate::baselines::interp::{interp_coefficients_with, interp_slice, InterpOptions};
use crate::denoiser::Denoiser;
use crate::diffusion::{corrupt_batch, sample_batch, stack_inputs, ConditioningSample, NoiseSchedule, SampleRequest};
use crate::error::{Error, Result};
use crate::pipeline::checkpoint::{decode_store, encode_store, Checkpoint, StoredOptimizer, CHECKPOINT_FORMAT};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::normalize::{denormalize_with, normalize_slice, reference_range};
use crate::registry::{Method, ModelSource, SliceRequest, StepLosses, Trainer, Upsampler};
use crate::volume::DwiSlice;

pub const DIFFUSION: &str = "diffusion";
pub const CGAN: &str = "cgan";
pub const INTERP: &str = "interp";

fn check_method(checkpoint: &Checkpoint, name: &str) -> Result<()> {
    if checkpoint.method != name {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with '{}', not '{name}'",
            checkpoint.method
        )));
    }
    Ok(())
}

fn check_requests(requests: &[SliceRequest], r: usize) -> Result<()> {
    for q in requests {
        if q.references.len() != r || q.directions.len() != r {
            return Err(Error::Validation(format!(
                "model expects {r} references, request has {} slices and {} directions",
                q.references.len(),
                q.directions.len()
            )));
        }
    }
    Ok(())
}

/// Normalised network-space view of a request and the range used to map the
/// result back to intensities.
struct Prepared {
    references: Vec<DwiSlice>,
    range: (f64, f64),
    slice_index: usize,
}

fn prepare(q: &SliceRequest) -> Result<Prepared> {
    let references: Vec<DwiSlice> = q.references.iter().map(normalize_slice).collect();
    let range = reference_range(&references)?;
    let slice_index = q.references[0].slice_index;
    Ok(Prepared { references, range, slice_index })
}

fn finish(generated: &DwiSlice, p: &Prepared) -> DwiSlice {
    let mut out = denormalize_with(generated, p.range.0, p.range.1);
    out.pixels.iter_mut().for_each(|v| *v = v.max(0.0));
    out.slice_index = p.slice_index;
    out
}

fn final_loss(g: &Graph<'_, f32>, v: qup_nn::Var) -> f64 {
    g.value(v).data()[0] as f64
}

pub struct DiffusionMethod;

pub struct DiffusionTrainer {
    denoiser: Denoiser<f32>,
    optimizer: Adam<f32>,
    schedule: NoiseSchedule,
    /// Running average of the weights and its decay.
    ema: Option<(ParamStore<f32>, f64)>,
    steps: u64,
}

impl DiffusionTrainer {
    pub fn denoiser(&self) -> &Denoiser<f32> {
        &self.denoiser
    }

    /// The weights used for sampling.
    pub fn sampling_weights(&self) -> &ParamStore<f32> {
        self.ema.as_ref().map_or(&self.denoiser.store, |(e, _)| e)
    }
}

/// Moves `average` towards `current`. Early updates use a smaller decay so
/// the average forgets the random initial weights quickly.
pub fn ema_update(average: &mut ParamStore<f32>, current: &ParamStore<f32>, decay: f64, step: u64) {
    let d = decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
    for (id, _, w) in current.iter() {
        for (a, &b) in average.get_mut(id).data_mut().iter_mut().zip(w.data()) {
            *a = d * *a + (1.0 - d) * b;
        }
    }
}

impl Trainer for DiffusionTrainer {
    fn train_step(&mut self, batch: &[&ConditioningSample], rng: &mut dyn RngCore) -> Result<StepLosses> {
        let cb = corrupt_batch(batch, &self.schedule, rng)?;
        let (loss, grads) = {
            let mut g = Graph::new(&self.denoiser.store);
            let x = g.input(cb.input);
            let b = g.input(cb.bmatrix);
            let pass = self.denoiser.net.forward(&mut g, x, &cb.steps, b)?;
            let loss = g.mse(pass.output, cb.noise)?;
            let grads = g.backward(loss)?;
            (final_loss(&g, loss), grads.for_params(self.denoiser.store.len()))
        };
        if !loss.is_finite() {
            return Err(Error::Validation(format!("training loss became {loss} at step {}", self.steps + 1)));
        }
        self.optimizer.step(&mut self.denoiser.store, &grads);
        self.steps += 1;
        if let Some((avg, decay)) = &mut self.ema {
            ema_update(avg, &self.denoiser.store, *decay, self.steps);
        }
        Ok(StepLosses { loss, discriminator_loss: None })
    }

    fn steps_done(&self) -> u64 {
        self.steps
    }

    fn upsampler(&self) -> Box<dyn Upsampler> {
        let mut denoiser = self.denoiser.clone();
        denoiser.store = self.sampling_weights().clone();
        Box::new(DiffusionUpsampler { denoiser, schedule: self.schedule.clone() })
    }

    fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            method: DIFFUSION.into(),
            step: self.steps,
            config: config.clone(),
            schedule: Some(self.schedule.params()),
            weights: encode_store(&self.denoiser.store),
            ema_weights: self.ema.as_ref().map_or_else(Vec::new, |(e, _)| encode_store(e)),
            optimizers: BTreeMap::from([("denoiser".to_string(), StoredOptimizer::encode(&self.optimizer, &self.denoiser.store))]),
            counters: BTreeMap::new(),
        }
    }
}

/// Ancestral sampling with a trained denoiser.
pub struct DiffusionUpsampler {
    pub denoiser: Denoiser<f32>,
    pub schedule: NoiseSchedule,
}

impl DiffusionUpsampler {
    /// Samples with the averaged weights when the checkpoint has them.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        check_method(c, DIFFUSION)?;
        let params = c.schedule.ok_or_else(|| Error::Checkpoint("diffusion checkpoint has no noise schedule".into()))?;
        let weights = if c.ema_weights.is_empty() { &c.weights } else { &c.ema_weights };
        let denoiser = Denoiser::from_weights(c.config.network()?, &decode_store(weights)?)?;
        Ok(Self { denoiser, schedule: NoiseSchedule::from_params(&params)? })
    }
}

impl Upsampler for DiffusionUpsampler {
    fn method(&self) -> &str {
        DIFFUSION
    }

    fn references(&self) -> usize {
        self.denoiser.config().references
    }

    fn generate(&self, requests: &[SliceRequest]) -> Result<Vec<DwiSlice>> {
        check_requests(requests, self.references())?;
        let prepared: Vec<Prepared> = requests.iter().map(prepare).collect::<Result<_>>()?;
        let sample_requests: Vec<SampleRequest> = requests
            .iter()
            .zip(&prepared)
            .map(|(q, p)| SampleRequest { references: p.references.clone(), bmatrix: q.bmatrix(), seed: q.seed })
            .collect();
        let generated = sample_batch(&sample_requests, &self.denoiser, &self.schedule)?;
        Ok(generated.iter().zip(&prepared).map(|(g, p)| finish(g, p)).collect())
    }
}

impl Method for DiffusionMethod {
    fn name(&self) -> &'static str {
        DIFFUSION
    }

    fn description(&self) -> &'static str {
        "conditional denoising diffusion with a cross-attention U-Net"
    }

    fn trainable(&self) -> bool {
        true
    }

    fn trainer(&self, config: &TrainConfig) -> Result<Box<dyn Trainer>> {
        let denoiser = Denoiser::new(config.network()?, config.seed)?;
        let optimizer = Adam::new(config.optimizer.adam(), &denoiser.store);
        let schedule = NoiseSchedule::from_params(&config.schedule)?;
        let ema = (config.ema_decay > 0.0).then(|| (denoiser.store.clone(), config.ema_decay));
        Ok(Box::new(DiffusionTrainer { denoiser, optimizer, schedule, ema, steps: 0 }))
    }

    fn resume(&self, c: &Checkpoint) -> Result<Box<dyn Trainer>> {
        check_method(c, DIFFUSION)?;
        let params = c.schedule.ok_or_else(|| Error::Checkpoint("diffusion checkpoint has no noise schedule".into()))?;
        let denoiser = Denoiser::from_weights(c.config.network()?, &decode_store(&c.weights)?)?;
        let optimizer = c.optimizer("denoiser")?.decode(c.config.optimizer.adam(), &denoiser.store)?;
        let ema = if c.config.ema_decay > 0.0 {
            if c.ema_weights.is_empty() {
                return Err(Error::Checkpoint("checkpoint config averages weights but holds no average".into()));
            }
            let mut avg = denoiser.store.clone();
            avg.load_from(&decode_store(&c.ema_weights)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
            Some((avg, c.config.ema_decay))
        } else {
            None
        };
        let schedule = NoiseSchedule::from_params(&params)?;
        Ok(Box::new(DiffusionTrainer { denoiser, optimizer, schedule, ema, steps: c.step }))
    }

    fn upsampler(&self, source: ModelSource<'_>) -> Result<Box<dyn Upsampler>> {
        match source {
            ModelSource::Checkpoint(c) => Ok(Box::new(DiffusionUpsampler::from_checkpoint(c)?)),
            ModelSource::Untrained { .. } => Err(Error::Config("the diffusion method needs a trained checkpoint".into())),
        }
    }
}

pub struct CganMethod;

pub struct CganMethodTrainer {
    inner: CganTrainer,
    config: TrainConfig,
}

impl CganMethodTrainer {
    pub fn inner(&self) -> &CganTrainer {
        &self.inner
    }
}

impl Trainer for CganMethodTrainer {
    fn train_step(&mut self, batch: &[&ConditioningSample], _rng: &mut dyn RngCore) -> Result<StepLosses> {
        let s = self.inner.train_step(batch)?;
        if !s.generator_loss.is_finite() {
            return Err(Error::Validation(format!("generator loss became {} at step {}", s.generator_loss, self.inner.generator_steps)));
        }
        Ok(StepLosses { loss: s.generator_loss, discriminator_loss: s.discriminator_loss })
    }

    fn steps_done(&self) -> u64 {
        self.inner.generator_steps
    }

    fn upsampler(&self) -> Box<dyn Upsampler> {
        Box::new(CganUpsampler { model: self.inner.model.clone(), references: self.config.network().map_or(0, |n| n.references) })
    }

    fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let t = &self.inner;
        let store = &t.model.store;
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            method: CGAN.into(),
            step: t.generator_steps,
            config: config.clone(),
            schedule: None,
            weights: encode_store(store),
            ema_weights: Vec::new(),
            optimizers: BTreeMap::from([
                ("generator".to_string(), StoredOptimizer::encode(&t.gen_opt, store)),
                ("discriminator".to_string(), StoredOptimizer::encode(&t.disc_opt, store)),
            ]),
            counters: BTreeMap::from([
                ("generator_steps".to_string(), t.generator_steps),
                ("discriminator_steps".to_string(), t.discriminator_steps),
            ]),
        }
    }
}

/// One-shot generation with a trained cGAN generator.
pub struct CganUpsampler {
    pub model: CganModel<f32>,
    pub references: usize,
}

impl CganUpsampler {
    fn load_model(c: &Checkpoint) -> Result<CganModel<f32>> {
        check_method(c, CGAN)?;
        CganModel::from_weights(c.config.network()?, &c.config.gan, &decode_store(&c.weights)?)
    }
}

impl Upsampler for CganUpsampler {
    fn method(&self) -> &str {
        CGAN
    }

    fn references(&self) -> usize {
        self.references
    }

    fn generate(&self, requests: &[SliceRequest]) -> Result<Vec<DwiSlice>> {
        check_requests(requests, self.references)?;
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let prepared: Vec<Prepared> = requests.iter().map(prepare).collect::<Result<_>>()?;
        let samples: Vec<ConditioningSample> = requests
            .iter()
            .zip(&prepared)
            .map(|(q, p)| {
                let (h, w) = (p.references[0].height, p.references[0].width);
                ConditioningSample::new(DwiSlice::zeros(h, w), p.references.clone(), q.bmatrix())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&ConditioningSample> = samples.iter().collect();
        let (input, bmatrix) = stack_inputs(&refs, None)?;
        let out: Tensor<f32> = self.model.generate(&input, &bmatrix)?;
        let (_, _, h, w) = out.dims4()?;
        Ok(prepared
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let pixels = out.item(i).iter().map(|&v| v as f64).collect();
                finish(&DwiSlice { height: h, width: w, pixels, slice_index: p.slice_index, norm_min: 0.0, norm_max: 1.0 }, p)
            })
            .collect())
    }
}

impl Method for CganMethod {
    fn name(&self) -> &'static str {
        CGAN
    }

    fn description(&self) -> &'static str {
        "conditional GAN: U-Net generator with an L1 term and a patch discriminator"
    }

    fn trainable(&self) -> bool {
        true
    }

    fn trainer(&self, config: &TrainConfig) -> Result<Box<dyn Trainer>> {
        let model = CganModel::new(config.network()?, &config.gan, config.seed)?;
        Ok(Box::new(CganMethodTrainer { inner: CganTrainer::new(model, config.gan.clone()), config: config.clone() }))
    }

    fn resume(&self, c: &Checkpoint) -> Result<Box<dyn Trainer>> {
        let model = CganUpsampler::load_model(c)?;
        let adam = c.config.gan.adam();
        let gen_opt = c.optimizer("generator")?.decode(adam, &model.store)?;
        let disc_opt = c.optimizer("discriminator")?.decode(adam, &model.store)?;
        let inner = CganTrainer {
            model,
            config: c.config.gan.clone(),
            gen_opt,
            disc_opt,
            generator_steps: c.counter("generator_steps"),
            discriminator_steps: c.counter("discriminator_steps"),
        };
        Ok(Box::new(CganMethodTrainer { inner, config: c.config.clone() }))
    }

    fn upsampler(&self, source: ModelSource<'_>) -> Result<Box<dyn Upsampler>> {
        match source {
            ModelSource::Checkpoint(c) => {
                let model = CganUpsampler::load_model(c)?;
                Ok(Box::new(CganUpsampler { model, references: c.config.network()?.references }))
            }
            ModelSource::Untrained { .. } => Err(Error::Config("the cgan method needs a trained checkpoint".into())),
        }
    }
}

/// Linear combination of the reference slices whose gradient-space
/// combination reproduces the target direction.
#[derive(Default)]
pub struct InterpMethod {
    pub options: InterpOptions,
}

pub struct InterpUpsampler {
    pub references: usize,
    pub options: InterpOptions,
}

impl Upsampler for InterpUpsampler {
    fn method(&self) -> &str {
        INTERP
    }

    fn references(&self) -> usize {
        self.references
    }

    fn generate(&self, requests: &[SliceRequest]) -> Result<Vec<DwiSlice>> {
        check_requests(requests, self.references)?;
        requests
            .iter()
            .map(|q| {
                let coefs = interp_coefficients_with(&q.target, &q.directions, self.options)?;
                let mut out = interp_slice(&coefs, &q.references)?;
                out.slice_index = q.references[0].slice_index;
                Ok(out)
            })
            .collect()
    }
}

impl Method for InterpMethod {
    fn name(&self) -> &'static str {
        INTERP
    }

    fn description(&self) -> &'static str {
        "linear interpolation of the reference slices in gradient space"
    }

    fn trainable(&self) -> bool {
        false
    }

    fn trainer(&self, _config: &TrainConfig) -> Result<Box<dyn Trainer>> {
        Err(Error::Config("the interp method has nothing to train".into()))
    }

    fn resume(&self, _checkpoint: &Checkpoint) -> Result<Box<dyn Trainer>> {
        Err(Error::Config("the interp method has nothing to train".into()))
    }

    fn upsampler(&self, source: ModelSource<'_>) -> Result<Box<dyn Upsampler>> {
        match source {
            ModelSource::Untrained { references } if references >= 3 => {
                Ok(Box::new(InterpUpsampler { references, options: self.options }))
            }
            ModelSource::Untrained { references } => Err(Error::Config(format!(
                "interp needs at least 3 references to span gradient space, got {references}"
            ))),
            ModelSource::Checkpoint(_) => Err(Error::Config("the interp method does not use a checkpoint".into())),
        }
    }
}

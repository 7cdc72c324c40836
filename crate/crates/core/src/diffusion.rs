//! Noise schedule, forward corruption, the ε-prediction training loss and
//! ancestral sampling conditioned on reference slices.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use qup_nn::Tensor;

use crate::error::{Error, Result};
use crate::qspace::{check_unit, geodesic_distance, Vec3};
use crate::rng::keyed_rng;
use crate::volume::DwiSlice;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

/// Per-step tables indexed from 1 to `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Linear β from `beta_start` to `beta_end` over `steps` steps, `σ_t = √β_t`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule { params: ScheduleParams { steps, beta_start, beta_end }, beta, alpha, alpha_bar, sigma })
}

impl NoiseSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        make_schedule(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Validation(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// One reverse step from `x_t` given the predicted noise. `z` is the fresh
    /// noise for `t > 1` and is ignored at `t = 1`.
    pub fn reverse_step(&self, t: usize, x: &mut [f64], eps_hat: &[f64], z: Option<&[f64]>) {
        let coef = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let inv = 1.0 / self.alpha(t).sqrt();
        let sigma = self.sigma(t);
        for i in 0..x.len() {
            let mut v = inv * (x[i] - coef * eps_hat[i]);
            if t > 1 {
                if let Some(z) = z {
                    v += sigma * z[i];
                }
            }
            x[i] = v;
        }
    }
}

/// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε`.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let i = schedule.check(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("noise of {} values for {} pixels", eps.len(), x0.len())));
    }
    let (a, b) = (schedule.alpha_bar[i].sqrt(), (1.0 - schedule.alpha_bar[i]).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A target slice, its references and the `(R+1)×3` gradient matrix whose
/// first row is the target direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSample {
    pub target: DwiSlice,
    pub references: Vec<DwiSlice>,
    pub bmatrix: Vec<Vec3>,
}

impl ConditioningSample {
    pub fn new(target: DwiSlice, references: Vec<DwiSlice>, bmatrix: Vec<Vec3>) -> Result<Self> {
        check_conditioning(&target, &references, &bmatrix)?;
        Ok(Self { target, references, bmatrix })
    }

    pub fn num_references(&self) -> usize {
        self.references.len()
    }
}

/// Validates shapes, unit rows and ascending reference distance.
pub fn check_conditioning(target: &DwiSlice, references: &[DwiSlice], bmatrix: &[Vec3]) -> Result<()> {
    if references.is_empty() {
        return Err(Error::Validation("at least one reference slice is required".into()));
    }
    if bmatrix.len() != references.len() + 1 {
        return Err(Error::Shape(format!(
            "bmatrix has {} rows for {} references",
            bmatrix.len(),
            references.len()
        )));
    }
    for r in references {
        target.check_same_shape(r)?;
    }
    for row in bmatrix {
        check_unit(row)?;
    }
    let d = bmatrix[1..]
        .iter()
        .map(|r| geodesic_distance(r, &bmatrix[0]))
        .collect::<Result<Vec<_>>>()?;
    if d.windows(2).any(|w| w[1] + 1e-9 < w[0]) {
        return Err(Error::Validation("references are not ordered by distance to the target".into()));
    }
    Ok(())
}

/// A network mapping `[n, R+1, h, w]` inputs, 1-based steps and
/// `[n, R+1, 3]` gradient matrices to `[n, 1, h, w]` noise predictions.
pub trait NoisePredictor {
    fn num_references(&self) -> usize;
    fn predict(&self, input: &Tensor<f32>, steps: &[usize], bmatrix: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Network input for a batch: noisy targets in channel 0, references after.
#[derive(Clone, Debug)]
pub struct CorruptedBatch {
    pub input: Tensor<f32>,
    pub steps: Vec<usize>,
    pub bmatrix: Tensor<f32>,
    pub noise: Tensor<f32>,
}

/// Stacks `[target, refs…]` into `[n, R+1, h, w]`, with `channel0` replacing
/// each target when given.
pub fn stack_inputs(samples: &[&ConditioningSample], channel0: Option<&[Vec<f64>]>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
    let (h, w, r) = (first.target.height, first.target.width, first.num_references());
    let plane = h * w;
    let mut data = Vec::with_capacity(samples.len() * (r + 1) * plane);
    let mut bm = Vec::with_capacity(samples.len() * (r + 1) * 3);
    for (i, s) in samples.iter().enumerate() {
        if s.num_references() != r || s.target.height != h || s.target.width != w {
            return Err(Error::Shape("batch samples differ in shape or reference count".into()));
        }
        let c0 = channel0.map_or(&s.target.pixels, |c| &c[i]);
        data.extend(c0.iter().map(|&v| v as f32));
        for rf in &s.references {
            data.extend(rf.pixels.iter().map(|&v| v as f32));
        }
        for row in &s.bmatrix {
            bm.extend(row.iter().map(|&v| v as f32));
        }
    }
    Ok((
        Tensor::new(&[samples.len(), r + 1, h, w], data)?,
        Tensor::new(&[samples.len(), r + 1, 3], bm)?,
    ))
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` per sample and noises only the
/// target channel.
pub fn corrupt_batch<R: Rng + ?Sized>(
    samples: &[&ConditioningSample],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<CorruptedBatch> {
    let mut steps = Vec::with_capacity(samples.len());
    let mut noisy = Vec::with_capacity(samples.len());
    let mut noise = Vec::new();
    for s in samples {
        let t = rng.random_range(1..=schedule.steps());
        let eps = standard_normal(rng, s.target.len());
        noisy.push(forward_noise(&s.target.pixels, t, &eps, schedule)?);
        noise.extend(eps.iter().map(|&v| v as f32));
        steps.push(t);
    }
    let (input, bmatrix) = stack_inputs(samples, Some(&noisy))?;
    let (n, _, h, w) = input.dims4()?;
    Ok(CorruptedBatch { input, steps, bmatrix, noise: Tensor::new(&[n, 1, h, w], noise)? })
}

/// Mean squared error between the drawn noise and the predicted noise.
pub fn training_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    sample: &ConditioningSample,
    denoiser: &P,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let batch = corrupt_batch(&[sample], schedule, rng)?;
    let pred = denoiser.predict(&batch.input, &batch.steps, &batch.bmatrix)?;
    if pred.shape() != batch.noise.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs noise {:?}", pred.shape(), batch.noise.shape())));
    }
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(batch.noise.data())
        .map(|(p, e)| (*p as f64 - *e as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// What to generate: references, gradient matrix and a per-item seed.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub references: Vec<DwiSlice>,
    pub bmatrix: Vec<Vec3>,
    pub seed: u64,
}

const INIT_STREAM: u64 = 0x1417;
const STEP_STREAM: u64 = 0x57e9;

/// The initial `x_T` drawn for a seed.
pub fn initial_noise(seed: u64, n: usize) -> Vec<f64> {
    standard_normal(&mut keyed_rng(seed, &[INIT_STREAM]), n)
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
pub fn sample<P: NoisePredictor + ?Sized>(
    references: &[DwiSlice],
    bmatrix: &[Vec3],
    denoiser: &P,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<DwiSlice> {
    let req = SampleRequest { references: references.to_vec(), bmatrix: bmatrix.to_vec(), seed };
    Ok(sample_batch(&[req], denoiser, schedule)?.remove(0))
}

/// Samples several requests with one network call per step. Each request
/// draws from its own stream keyed by its seed, so results do not depend on
/// how requests are grouped into batches.
pub fn sample_batch<P: NoisePredictor + ?Sized>(
    requests: &[SampleRequest],
    denoiser: &P,
    schedule: &NoiseSchedule,
) -> Result<Vec<DwiSlice>> {
    let first = match requests.first() {
        Some(f) => f,
        None => return Ok(Vec::new()),
    };
    let r = denoiser.num_references();
    let template = first.references.first().ok_or_else(|| Error::Validation("no reference slices".into()))?;
    let (h, w) = (template.height, template.width);
    let plane = h * w;
    for req in requests {
        if req.references.len() != r {
            return Err(Error::Validation(format!(
                "denoiser expects {r} references, request has {}",
                req.references.len()
            )));
        }
        check_conditioning(&DwiSlice::zeros(h, w), &req.references, &req.bmatrix)?;
    }
    let n = requests.len();
    let mut x: Vec<Vec<f64>> = requests.iter().map(|q| initial_noise(q.seed, plane)).collect();
    let mut rngs: Vec<_> = requests.iter().map(|q| keyed_rng(q.seed, &[STEP_STREAM])).collect();
    let mut input = vec![0f32; n * (r + 1) * plane];
    let mut bm = Vec::with_capacity(n * (r + 1) * 3);
    for (i, q) in requests.iter().enumerate() {
        let base = i * (r + 1) * plane;
        for (k, rf) in q.references.iter().enumerate() {
            let dst = &mut input[base + (k + 1) * plane..base + (k + 2) * plane];
            for (d, s) in dst.iter_mut().zip(&rf.pixels) {
                *d = *s as f32;
            }
        }
        bm.extend(q.bmatrix.iter().flat_map(|row| row.map(|v| v as f32)));
    }
    let mut input = Tensor::new(&[n, r + 1, h, w], input)?;
    let bm = Tensor::new(&[n, r + 1, 3], bm)?;
    for t in (1..=schedule.steps()).rev() {
        for (i, xi) in x.iter().enumerate() {
            let base = i * (r + 1) * plane;
            for (d, s) in input.data_mut()[base..base + plane].iter_mut().zip(xi) {
                *d = *s as f32;
            }
        }
        let eps = denoiser.predict(&input, &vec![t; n], &bm)?;
        if eps.shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!("denoiser returned {:?}", eps.shape())));
        }
        for (i, xi) in x.iter_mut().enumerate() {
            let eps_i: Vec<f64> = eps.data()[i * plane..(i + 1) * plane].iter().map(|&v| v as f64).collect();
            let z = (t > 1).then(|| standard_normal(&mut rngs[i], plane));
            schedule.reverse_step(t, xi, &eps_i, z.as_deref());
        }
    }
    Ok(x
        .into_iter()
        .map(|pixels| DwiSlice { height: h, width: w, pixels, slice_index: template.slice_index, norm_min: 0.0, norm_max: 1.0 })
        .collect())
}

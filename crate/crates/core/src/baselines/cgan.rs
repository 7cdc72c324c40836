//! Conditional GAN: the cross-attention U-Net as generator and a PatchGAN
//! discriminator that also attends to the gradient matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use qup_nn::{Adam, AdamConfig, Conv2d, Graph, GroupNorm, Linear, ParamStore, Real, Tensor, Var};

use crate::denoiser::{DenoiserConfig, UNet};
use crate::diffusion::{stack_inputs, ConditioningSample};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Layout of the patch discriminator: one `k4` convolution per entry, then
/// a `k4 s1` output convolution producing one logit per patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub token_dim: usize,
}

impl DiscriminatorConfig {
    /// 16×16 receptive field.
    pub fn desk() -> Self {
        Self { channels: vec![32, 64], strides: vec![2, 1], token_dim: 16 }
    }

    /// 70×70 receptive field.
    pub fn full() -> Self {
        Self { channels: vec![64, 128, 256, 512], strides: vec![2, 2, 2, 1], token_dim: 64 }
    }

    pub fn small() -> Self {
        Self { channels: vec![16, 32], strides: vec![2, 1], token_dim: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config("discriminator channels and strides must be non-empty and equal length".into()));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.token_dim == 0 {
            return Err(Error::Config("discriminator widths and strides must be positive".into()));
        }
        Ok(())
    }

    /// Side of the input patch seen by one output logit.
    pub fn receptive_field(&self) -> usize {
        let mut rf = KERNEL;
        for &s in self.strides.iter().rev() {
            rf = (rf - 1) * s + KERNEL;
        }
        rf
    }

    /// Logit grid for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let step = |n: usize, s: usize| (n + 2 * PAD - KERNEL) / s + 1;
        let (mut h, mut w) = (h, w);
        for &s in &self.strides {
            h = step(h, s);
            w = step(w, s);
        }
        (step(h, 1), step(w, 1))
    }
}

const KERNEL: usize = 4;
const PAD: usize = 1;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub lambda_g: f64,
    pub lambda_v: f64,
    /// Discriminator updates per two generator updates.
    pub disc_updates_per_two_gen: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub discriminator: DiscriminatorConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda_g: 1.0,
            lambda_v: 100.0,
            disc_updates_per_two_gen: 1,
            lr: 2.5e-5,
            beta1: 0.5,
            beta2: 0.999,
            discriminator: DiscriminatorConfig::desk(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_g >= 0.0 && self.lambda_v >= 0.0) {
            return Err(Error::Config("lambda_G and lambda_V must be non-negative".into()));
        }
        if self.disc_updates_per_two_gen > 2 {
            return Err(Error::Config("at most two discriminator updates per two generator updates".into()));
        }
        self.discriminator.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }

    /// Whether generator update number `step` (1-based) is followed by a
    /// discriminator update.
    pub fn disc_update_after(&self, step: u64) -> bool {
        match self.disc_updates_per_two_gen {
            0 => false,
            1 => step.is_multiple_of(2),
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DiscLayer {
    conv: Conv2d,
    norm: Option<GroupNorm>,
}

/// PatchGAN over `[slice, references…]` with cross-attention to the
/// gradient rows after the first convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminator {
    pub config: DiscriminatorConfig,
    layers: Vec<DiscLayer>,
    token: Linear,
    w_q: Conv2d,
    w_k: Linear,
    w_v: Linear,
    output: Conv2d,
}

impl PatchDiscriminator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: &DiscriminatorConfig,
        in_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut cin = in_channels;
        let mut layers = Vec::new();
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            let conv = Conv2d::new(store, &format!("disc.conv{i}"), cin, c, KERNEL, s, PAD, true, rng);
            let norm = (i > 0).then(|| GroupNorm::new(store, &format!("disc.norm{i}"), c));
            layers.push(DiscLayer { conv, norm });
            cin = c;
        }
        let c0 = config.channels[0];
        let d = config.token_dim;
        Ok(Self {
            config: config.clone(),
            layers,
            token: Linear::new(store, "disc.token", 3, d, true, rng),
            w_q: Conv2d::new(store, "disc.attn.w_q", c0, d, 1, 1, 0, false, rng),
            w_k: Linear::new(store, "disc.attn.w_k", d, d, false, rng),
            w_v: Linear::new(store, "disc.attn.w_v", d, c0, false, rng),
            output: Conv2d::new(store, "disc.out", cin, 1, KERNEL, 1, PAD, true, rng),
        })
    }

    /// Patch logits `[n, 1, h', w']`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, bmatrix: Var) -> Result<Var> {
        let (n, rows, _) = g.value(bmatrix).dims3()?;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.conv.forward(g, h)?;
            if let Some(norm) = &layer.norm {
                h = norm.forward(g, h)?;
            }
            h = g.leaky_relu(h, T::lit(LEAK));
            if i == 0 {
                let flat = g.reshape(bmatrix, &[n * rows, 3])?;
                let tokens = self.token.forward(g, flat)?;
                let q = self.w_q.forward(g, h)?;
                let k = self.w_k.forward(g, tokens)?;
                let k = g.reshape(k, &[n, rows, self.config.token_dim])?;
                let v = self.w_v.forward(g, tokens)?;
                let v = g.reshape(v, &[n, rows, self.config.channels[0]])?;
                let a = g.cross_attention(q, k, v, T::lit(1.0 / (self.config.token_dim as f64).sqrt()))?;
                h = g.add(h, a)?;
            }
        }
        Ok(self.output.forward(g, h)?)
    }
}

/// Generator and discriminator sharing one parameter store.
#[derive(Clone, Debug)]
pub struct CganModel<T: Real> {
    pub generator: UNet,
    pub discriminator: PatchDiscriminator,
    pub store: ParamStore<T>,
    /// Number of leading store entries that belong to the generator.
    pub generator_params: usize,
}

impl<T: Real> CganModel<T> {
    pub fn new(generator: &DenoiserConfig, gan: &GanConfig, seed: u64) -> Result<Self> {
        gan.validate()?;
        let mut store = ParamStore::new();
        let mut rng = keyed_rng(seed, &[0xc6a2]);
        let gen_net = UNet::new(generator, &mut store, &mut rng)?;
        let generator_params = store.len();
        let disc = PatchDiscriminator::new(&gan.discriminator, generator.in_channels(), &mut store, &mut rng)?;
        Ok(Self { generator: gen_net, discriminator: disc, store, generator_params })
    }

    pub fn from_weights(generator: &DenoiserConfig, gan: &GanConfig, weights: &ParamStore<T>) -> Result<Self> {
        let mut m = Self::new(generator, gan, 0)?;
        m.store.load_from(weights).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(m)
    }

    /// Generator input: the target channel is zero and the step is 0.
    pub fn generator_input(samples: &[&ConditioningSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let zeros: Vec<Vec<f64>> = samples.iter().map(|s| vec![0.0; s.target.len()]).collect();
        stack_inputs(samples, Some(&zeros))
    }

    /// Generated slices `[n, 1, h, w]` for the given conditioning.
    pub fn generate(&self, references: &Tensor<T>, bmatrix: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(references.clone());
        let b = g.input(bmatrix.clone());
        let n = references.shape()[0];
        let pass = self.generator.forward(&mut g, x, &vec![0; n], b)?;
        Ok(g.value(pass.output).clone())
    }
}

/// Losses from one generator update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanStep {
    pub generator_loss: f64,
    pub adversarial: f64,
    pub l1: f64,
    /// `BCE(D(real), 1) + BCE(D(fake), 0)` when the discriminator was updated.
    pub discriminator_loss: Option<f64>,
}

/// Alternating optimisation with separate Adam states for each network.
pub struct CganTrainer {
    pub model: CganModel<f32>,
    pub config: GanConfig,
    pub gen_opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
}

fn target_tensor(samples: &[&ConditioningSample]) -> Result<Tensor<f32>> {
    let (h, w) = (samples[0].target.height, samples[0].target.width);
    let data = samples.iter().flat_map(|s| s.target.pixels.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::new(&[samples.len(), 1, h, w], data)?)
}

impl CganTrainer {
    pub fn new(model: CganModel<f32>, config: GanConfig) -> Self {
        let gen_opt = Adam::new(config.adam(), &model.store);
        let disc_opt = Adam::new(config.adam(), &model.store);
        Self { model, config, gen_opt, disc_opt, generator_steps: 0, discriminator_steps: 0 }
    }

    /// Discriminator input: the candidate slice followed by the references.
    fn disc_input(g: &mut Graph<'_, f32>, slice: Var, refs: Var, r: usize) -> Result<Var> {
        let (n, _, h, w) = g.value(refs).dims4()?;
        let ref_data: Vec<f32> = (0..n).flat_map(|i| g.value(refs).item(i)[h * w..].to_vec()).collect();
        let only_refs = g.input(Tensor::new(&[n, r, h, w], ref_data)?);
        Ok(g.concat(&[slice, only_refs])?)
    }

    /// One generator update, followed by a discriminator update on every
    /// second call.
    pub fn train_step(&mut self, samples: &[&ConditioningSample]) -> Result<GanStep> {
        if samples.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let r = samples[0].num_references();
        let (input, bmatrix) = CganModel::<f32>::generator_input(samples)?;
        let target = target_tensor(samples)?;
        let n = samples.len();
        let split = self.model.generator_params;
        let cfg = &self.config;

        let (fake_value, adversarial, l1, generator_loss, gen_grads) = {
            let mut g = Graph::new(&self.model.store);
            let x = g.input(input.clone());
            let b = g.input(bmatrix.clone());
            let fake = self.model.generator.forward(&mut g, x, &vec![0; n], b)?.output;
            let dx = Self::disc_input(&mut g, fake, x, r)?;
            let logits = self.model.discriminator.forward(&mut g, dx, b)?;
            let adv = g.bce_with_logits(logits, 1.0);
            let rec = g.l1(fake, target.clone())?;
            let adv_w = g.scale(adv, cfg.lambda_g as f32);
            let rec_w = g.scale(rec, cfg.lambda_v as f32);
            let loss = g.add(adv_w, rec_w)?;
            let grads = g.backward(loss)?;
            let mut per_param = grads.for_params(self.model.store.len());
            per_param[split..].iter_mut().for_each(|p| *p = None);
            (
                g.value(fake).clone(),
                g.value(adv).item(0)[0] as f64,
                g.value(rec).item(0)[0] as f64,
                g.value(loss).item(0)[0] as f64,
                per_param,
            )
        };
        self.gen_opt.step(&mut self.model.store, &gen_grads);
        self.generator_steps += 1;

        let discriminator_loss = if cfg.disc_update_after(self.generator_steps) {
            let (loss, grads) = {
                let mut g = Graph::new(&self.model.store);
                let x = g.input(input);
                let b = g.input(bmatrix);
                let real = g.input(target);
                let fake = g.input(fake_value);
                let real_in = Self::disc_input(&mut g, real, x, r)?;
                let fake_in = Self::disc_input(&mut g, fake, x, r)?;
                let real_logits = self.model.discriminator.forward(&mut g, real_in, b)?;
                let fake_logits = self.model.discriminator.forward(&mut g, fake_in, b)?;
                let lr = g.bce_with_logits(real_logits, 1.0);
                let lf = g.bce_with_logits(fake_logits, 0.0);
                let loss = g.add(lr, lf)?;
                let grads = g.backward(loss)?;
                let mut per_param = grads.for_params(self.model.store.len());
                per_param[..split].iter_mut().for_each(|p| *p = None);
                (g.value(loss).item(0)[0] as f64, per_param)
            };
            self.disc_opt.step(&mut self.model.store, &grads);
            self.discriminator_steps += 1;
            Some(loss)
        } else {
            None
        };
        Ok(GanStep { generator_loss, adversarial, l1, discriminator_loss })
    }
}

/// `BCE(p, 1) + BCE(p, 0)` for a discriminator that outputs probability `p`.
pub fn discriminator_loss_at(p: f64) -> f64 {
    -(p.ln()) - (1.0 - p).ln()
}

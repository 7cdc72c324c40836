//! Cross-attention U-Net predicting the noise in the target channel.
//!
//! Every block runs `H1 = FF(H0) + H0` followed by
//! `H2 = softmax((W_Q H1)(W_K B)ᵀ / √d_k) · W_V B + H1`, where queries come
//! from every pixel and the keys and values come from the `R+1` gradient
//! rows, each linearly projected to a `d_k`-wide token `B`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use qup_nn::{Conv2d, Graph, GroupNorm, Linear, ParamStore, Real, Tensor, Var};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Feature width per resolution level, finest first.
    pub channels: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Number of reference slices `R`; the network takes `R+1` channels.
    pub references: usize,
    /// Width `d_k` of the gradient tokens and attention queries.
    pub token_dim: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn desk(references: usize) -> Self {
        Self { channels: vec![32, 32, 64], res_blocks_per_level: 1, references, token_dim: 32, time_dim: 64 }
    }

    pub fn full(references: usize) -> Self {
        Self { channels: vec![128, 128, 256], res_blocks_per_level: 1, references, token_dim: 64, time_dim: 256 }
    }

    pub fn compact(references: usize) -> Self {
        Self { channels: vec![16, 16, 32], res_blocks_per_level: 1, references, token_dim: 16, time_dim: 32 }
    }

    pub fn toy(references: usize) -> Self {
        Self { channels: vec![4, 8], res_blocks_per_level: 1, references, token_dim: 4, time_dim: 8 }
    }

    pub fn preset(name: &str, references: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(references)),
            "full" => Ok(Self::full(references)),
            "compact" => Ok(Self::compact(references)),
            "toy" => Ok(Self::toy(references)),
            other => Err(Error::Config(format!("unknown denoiser preset '{other}' (desk, full, compact, toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("channels {:?} must be non-empty and positive", self.channels)));
        }
        if self.res_blocks_per_level == 0 || self.references == 0 || self.token_dim == 0 {
            return Err(Error::Config("blocks per level, references and token width must be positive".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time embedding width {} must be even", self.time_dim)));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.references + 1
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial sizes are padded to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Sinusoidal embedding of a (possibly zero) step index, `[n, dim]`.
pub fn timestep_embedding<T: Real>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[steps.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let k = col % half;
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = steps[row] as f64 * freq;
        T::lit(if col < half { arg.sin() } else { arg.cos() })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    /// Per-pixel query projection (1×1 convolution, no bias).
    pub w_q: Conv2d,
    pub w_k: Linear,
    pub w_v: Linear,
}

impl AttentionBlock {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.ff.norm1"), c),
            conv1: Conv2d::same3(store, &format!("{name}.ff.conv1"), c, c, rng),
            time: Linear::new(store, &format!("{name}.time"), cfg.time_dim, c, true, rng),
            norm2: GroupNorm::new(store, &format!("{name}.ff.norm2"), c),
            conv2: Conv2d::same3(store, &format!("{name}.ff.conv2"), c, c, rng),
            w_q: Conv2d::new(store, &format!("{name}.attn.w_q"), c, cfg.token_dim, 1, 1, 0, false, rng),
            w_k: Linear::new(store, &format!("{name}.attn.w_k"), cfg.token_dim, cfg.token_dim, false, rng),
            w_v: Linear::new(store, &format!("{name}.attn.w_v"), cfg.token_dim, c, false, rng),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, h0: Var, temb: Var, tokens: &Tokens, attn: &mut Vec<Var>) -> Result<Var> {
        let mut f = self.norm1.forward(g, h0)?;
        f = g.silu(f);
        f = self.conv1.forward(g, f)?;
        let e = self.time.forward(g, temb)?;
        f = g.add_channel(f, e)?;
        f = self.norm2.forward(g, f)?;
        f = g.silu(f);
        f = self.conv2.forward(g, f)?;
        let h1 = g.add(f, h0)?;

        let q = self.w_q.forward(g, h1)?;
        let k = self.w_k.forward(g, tokens.flat)?;
        let k = g.reshape(k, &[tokens.n, tokens.len, tokens.dim])?;
        let v = self.w_v.forward(g, tokens.flat)?;
        let c = g.value(v).shape()[1];
        let v = g.reshape(v, &[tokens.n, tokens.len, c])?;
        let a = g.cross_attention(q, k, v, T::lit(1.0 / (tokens.dim as f64).sqrt()))?;
        attn.push(a);
        Ok(g.add(a, h1)?)
    }

    fn attention_params(&self) -> [qup_nn::ParamId; 3] {
        [self.w_q.weight, self.w_k.weight, self.w_v.weight]
    }
}

struct Tokens {
    /// `[n·(R+1), d_k]`.
    flat: Var,
    n: usize,
    len: usize,
    dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub encoder: Vec<AttentionBlock>,
    /// Stride-2 convolution to the next level, absent at the coarsest level.
    pub down: Option<Conv2d>,
    /// 1×1 convolution merging the upsampled path with the skip connection.
    pub merge: Conv2d,
    pub decoder: Vec<AttentionBlock>,
    /// Convolution after nearest-neighbour upsampling to the finer level.
    pub up: Option<Conv2d>,
}

/// Layer handles of the U-Net; weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: DenoiserConfig,
    pub input: Conv2d,
    pub token: Linear,
    pub time_mlp: Linear,
    pub levels: Vec<Level>,
    pub output: Conv2d,
}

/// The graph values of one forward pass.
pub struct ForwardPass {
    pub output: Var,
    /// Attention outputs, encoder blocks first.
    pub attention: Vec<Var>,
}

impl UNet {
    pub fn new<T: Real, R: Rng + ?Sized>(config: &DenoiserConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let input = Conv2d::same3(store, "input", config.in_channels(), ch[0], rng);
        let token = Linear::new(store, "token", 3, config.token_dim, true, rng);
        let time_mlp = Linear::new(store, "time_mlp", config.time_dim, config.time_dim, true, rng);
        let mut encoders = Vec::with_capacity(ch.len());
        for (l, &c) in ch.iter().enumerate() {
            let blocks: Vec<AttentionBlock> = (0..config.res_blocks_per_level)
                .map(|b| AttentionBlock::new(store, &format!("enc{l}.{b}"), c, config, rng))
                .collect();
            let down = (l + 1 < ch.len()).then(|| Conv2d::new(store, &format!("down{l}"), c, ch[l + 1], 3, 2, 1, true, rng));
            encoders.push((blocks, down));
        }
        // decoder parameters are registered coarsest level first, the order they run in
        let mut decoders = Vec::with_capacity(ch.len());
        for l in (0..ch.len()).rev() {
            let c = ch[l];
            let merge = Conv2d::new(store, &format!("merge{l}"), 2 * c, c, 1, 1, 0, true, rng);
            let blocks: Vec<AttentionBlock> = (0..config.res_blocks_per_level)
                .map(|b| AttentionBlock::new(store, &format!("dec{l}.{b}"), c, config, rng))
                .collect();
            let up = (l > 0).then(|| Conv2d::same3(store, &format!("up{l}"), c, ch[l - 1], rng));
            decoders.push((merge, blocks, up));
        }
        decoders.reverse();
        let levels = encoders
            .into_iter()
            .zip(decoders)
            .map(|((encoder, down), (merge, decoder, up))| Level { encoder, down, merge, decoder, up })
            .collect();
        let output = Conv2d::same3(store, "out.conv", ch[0], 1, rng);
        Ok(Self { config: config.clone(), input, token, time_mlp, levels, output })
    }

    /// `x: [n, R+1, h, w]`, `bmatrix: [n, R+1, 3]`, one step per item.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, steps: &[usize], bmatrix: Var) -> Result<ForwardPass> {
        let (n, c_in, h, w) = g.value(x).dims4()?;
        let (bn, rows, cols) = g.value(bmatrix).dims3()?;
        let cfg = &self.config;
        if c_in != cfg.in_channels() {
            return Err(Error::Shape(format!("input has {c_in} channels, expected {}", cfg.in_channels())));
        }
        if bn != n || rows != cfg.in_channels() || cols != 3 {
            return Err(Error::Shape(format!(
                "bmatrix [{bn}, {rows}, {cols}] for batch {n}: expected {} rows of 3",
                cfg.in_channels()
            )));
        }
        if steps.len() != n {
            return Err(Error::Shape(format!("{} steps for batch {n}", steps.len())));
        }
        let m = cfg.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut hcur = if (ph, pw) != (h, w) { g.pad_to(x, ph, pw)? } else { x };

        let temb = g.input(timestep_embedding(steps, cfg.time_dim));
        let temb = self.time_mlp.forward(g, temb)?;
        let temb = g.silu(temb);
        let bflat = g.reshape(bmatrix, &[n * rows, 3])?;
        let tokens = Tokens { flat: self.token.forward(g, bflat)?, n, len: rows, dim: cfg.token_dim };

        let mut attention = Vec::new();
        hcur = self.input.forward(g, hcur)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            for block in &level.encoder {
                hcur = block.forward(g, hcur, temb, &tokens, &mut attention)?;
            }
            skips.push(hcur);
            if let Some(down) = &level.down {
                hcur = down.forward(g, hcur)?;
            }
        }
        for (l, level) in self.levels.iter().enumerate().rev() {
            let cat = g.concat(&[hcur, skips[l]])?;
            hcur = level.merge.forward(g, cat)?;
            for block in &level.decoder {
                hcur = block.forward(g, hcur, temb, &tokens, &mut attention)?;
            }
            if let Some(up) = &level.up {
                hcur = g.upsample2x(hcur)?;
                hcur = up.forward(g, hcur)?;
            }
        }
        // The output convolution reads the residual stream directly. A norm
        // here would strip the spatial mean that the noise estimate needs.
        let mut out = self.output.forward(g, hcur)?;
        if (ph, pw) != (h, w) {
            out = g.crop(out, h, w)?;
        }
        Ok(ForwardPass { output: out, attention })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &AttentionBlock> {
        self.levels.iter().flat_map(|l| l.encoder.iter().chain(l.decoder.iter()))
    }
}

/// A U-Net together with its weights.
#[derive(Clone, Debug)]
pub struct Denoiser<T: Real> {
    pub net: UNet,
    pub store: ParamStore<T>,
}

impl<T: Real> Denoiser<T> {
    /// Fresh weights drawn from a stream keyed by `seed`.
    pub fn new(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = keyed_rng(seed, &[0xde05]);
        let net = UNet::new(config, &mut store, &mut rng)?;
        Ok(Self { net, store })
    }

    /// Rebuilds the network for `config` and loads `weights`, which must
    /// match the expected parameter names and shapes.
    pub fn from_weights(config: &DenoiserConfig, weights: &ParamStore<T>) -> Result<Self> {
        let mut d = Self::new(config, 0)?;
        d.store.load_from(weights).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(d)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.net.config
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser { net: self.net.clone(), store: self.store.cast() }
    }

    /// Output values for plain tensors, without recording gradients.
    pub fn forward_values(&self, x: &Tensor<T>, steps: &[usize], bmatrix: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference(&self.store);
        let xv = g.input(x.clone());
        let bv = g.input(bmatrix.clone());
        let pass = self.net.forward(&mut g, xv, steps, bv)?;
        Ok(g.value(pass.output).clone())
    }

    /// Sets every value projection `W_V` to zero.
    pub fn zero_value_projections(&mut self) {
        let ids: Vec<_> = self.net.blocks().map(|b| b.w_v.weight).collect();
        for id in ids {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Parameter ids of `(W_Q, W_K, W_V)` for every block.
    pub fn attention_params(&self) -> Vec<[qup_nn::ParamId; 3]> {
        self.net.blocks().map(AttentionBlock::attention_params).collect()
    }
}

impl NoisePredictor for Denoiser<f32> {
    fn num_references(&self) -> usize {
        self.net.config.references
    }

    fn predict(&self, input: &Tensor<f32>, steps: &[usize], bmatrix: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_values(input, steps, bmatrix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn inputs<T: Real>(cfg: &DenoiserConfig, n: usize, h: usize, w: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
        let mut rng = keyed_rng(seed, &[]);
        let x = Tensor::from_fn(&[n, cfg.in_channels(), h, w], |_| T::lit(rng.random_range(0.0..1.0)));
        let rows = [[1.0, 0.0, 0.0], [0.8, 0.6, 0.0], [0.0, 0.6, 0.8], [0.0, 0.0, 1.0]];
        let b = Tensor::from_fn(&[n, cfg.in_channels(), 3], |i| T::lit(rows[(i / 3) % cfg.in_channels() % 4][i % 3]));
        (x, b)
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = DenoiserConfig::compact(3);
        let d = Denoiser::<f32>::new(&cfg, 1).unwrap();
        let (x, b) = inputs::<f32>(&cfg, 2, 32, 32, 2);
        assert_eq!(d.predict(&x, &[5, 900], &b).unwrap().shape(), &[2, 1, 32, 32]);
        // non-multiple sizes are padded and cropped back
        let (x, b) = inputs::<f32>(&cfg, 1, 13, 10, 2);
        assert_eq!(d.predict(&x, &[5], &b).unwrap().shape(), &[1, 1, 13, 10]);
    }

    #[test]
    fn rejects_wrong_bmatrix_rows() {
        let cfg = DenoiserConfig::toy(2);
        let d = Denoiser::<f32>::new(&cfg, 1).unwrap();
        let (x, _) = inputs::<f32>(&cfg, 1, 4, 4, 2);
        let bad = Tensor::zeros(&[1, 2, 3]);
        assert!(matches!(d.predict(&x, &[1], &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn full_preset_layout() {
        let cfg = DenoiserConfig::full(3);
        assert_eq!(cfg.channels, vec![128, 128, 256]);
        assert_eq!(cfg.res_blocks_per_level, 1);
        assert_eq!(cfg.size_multiple(), 4);
        assert!(DenoiserConfig::preset("huge", 3).is_err());
    }

    #[test]
    fn weights_round_trip_and_layout_is_checked() {
        let cfg = DenoiserConfig::toy(3);
        let a = Denoiser::<f32>::new(&cfg, 1).unwrap();
        let b = Denoiser::<f32>::from_weights(&cfg, &a.store).unwrap();
        let (x, bm) = inputs::<f32>(&cfg, 1, 8, 8, 3);
        assert_eq!(a.predict(&x, &[3], &bm).unwrap(), b.predict(&x, &[3], &bm).unwrap());
        assert!(Denoiser::<f32>::from_weights(&DenoiserConfig::toy(2), &a.store).is_err());
    }

    #[test]
    fn batch_items_are_independent() {
        let cfg = DenoiserConfig::toy(3);
        let d = Denoiser::<f32>::new(&cfg, 4).unwrap();
        let (x, b) = inputs::<f32>(&cfg, 3, 8, 8, 5);
        let all = d.predict(&x, &[1, 2, 3], &b).unwrap();
        let one = d
            .predict(
                &Tensor::new(&[1, 4, 8, 8], x.item(1).to_vec()).unwrap(),
                &[2],
                &Tensor::new(&[1, 4, 3], b.item(1).to_vec()).unwrap(),
            )
            .unwrap();
        assert_eq!(all.item(1), one.data());
    }

    #[test]
    fn target_row_changes_output_and_zero_wv_removes_it() {
        let cfg = DenoiserConfig::toy(3);
        let mut d = Denoiser::<f32>::new(&cfg, 6).unwrap();
        let (x, b1) = inputs::<f32>(&cfg, 1, 8, 8, 7);
        let mut b2 = b1.clone();
        b2.data_mut()[..3].copy_from_slice(&[0.0, 1.0, 0.0]);
        let diff = |d: &Denoiser<f32>| {
            let o1 = d.predict(&x, &[10], &b1).unwrap();
            let o2 = d.predict(&x, &[10], &b2).unwrap();
            o1.data().iter().zip(o2.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max)
        };
        assert!(diff(&d) > 0.0);
        d.zero_value_projections();
        assert_eq!(diff(&d), 0.0);
    }

    #[test]
    fn attention_rows_sum_to_one_and_gradients_reach_all_inputs() {
        let cfg = DenoiserConfig::toy(3);
        let d = Denoiser::<f64>::new(&cfg, 8).unwrap();
        let (x, b) = inputs::<f64>(&cfg, 1, 8, 8, 9);
        let mut g = Graph::new(&d.store);
        let xv = g.input_with_grad(x);
        let bv = g.input(b);
        let pass = d.net.forward(&mut g, xv, &[7], bv).unwrap();
        for &a in &pass.attention {
            let w = g.attention_weights(a).unwrap();
            for row in w.chunks(cfg.in_channels()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let target = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.37).sin());
        let loss = g.mse(pass.output, target).unwrap();
        let grads = g.backward(loss).unwrap();
        for ids in d.attention_params() {
            for id in ids {
                assert!(grads.param(id).unwrap().sq_norm() > 0.0, "{}", d.store.name(id));
            }
        }
        let gx = grads.get(xv).unwrap();
        for c in 0..cfg.in_channels() {
            assert!(gx.data()[c * 64..(c + 1) * 64].iter().any(|v| *v != 0.0), "channel {c}");
        }
    }

    #[test]
    fn timestep_embedding_is_sinusoidal() {
        let e = timestep_embedding::<f64>(&[0, 3], 4);
        assert_eq!(e.data()[..4], [0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[5] - (0.03f64).sin()).abs() < 1e-15);
    }
}

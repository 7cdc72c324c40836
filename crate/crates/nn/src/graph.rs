//! Tape of tensor operations with reverse-mode differentiation.

use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{attention, conv, norm};
use crate::params::{ParamId, ParamStore};
use crate::real::{matmul, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    LeakyRelu(Var, T),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        weights: Vec<T>,
        scale: T,
    },
    Concat(Vec<Var>),
    Upsample2x(Var),
    PadTo(Var),
    Crop(Var),
    Reshape(Var),
    Mse(Var, Tensor<T>),
    L1(Var, Tensor<T>),
    BceLogits(Var, T),
    Dot(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations over tensors; parameters are read from a borrowed store.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    track: bool,
}

impl<'s, T: Real> Graph<'s, T> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
        }
    }

    /// A forward-only graph; `backward` returns no gradients.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is retained by [`Graph::backward`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        let track = self.track;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input_with_grad(self.store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Attention weights `[n, h*w, l]` recorded by a cross-attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x[n, c, :, :] + e[n, c]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (en, ec) = self.value(e).dims2()?;
        if (en, ec) != (n, c) {
            return shape_err("add_channel", format!("bias [{en}, {ec}] for input [{n}, {c}, ..]"));
        }
        let hw = h * w;
        let mut out = self.value(x).clone();
        let ev = self.value(e).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = ev[i];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddChannel(x, e), &[x, e]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &parents))
    }

    /// `x[m, k] · w[o, k]ᵀ + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.value(x).dims2()?;
        let (o, wk) = self.value(w).dims2()?;
        if wk != k {
            return shape_err("linear", format!("input width {k} != weight width {wk}"));
        }
        let mut out = Tensor::zeros(&[m, o]);
        matmul(m, k, o, T::one(), self.value(x).data(), false, self.value(w).data(), true, T::zero(), out.data_mut());
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != o {
                return shape_err("linear", format!("bias has {} entries for {o} outputs", bv.numel()));
            }
            for row in out.data_mut().chunks_mut(o) {
                for (r, &bb) in row.iter_mut().zip(bv.data()) {
                    *r += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let o = norm::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, eps)?;
        Ok(self.push(
            o.y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: o.mean,
                rstd: o.rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z / (T::one() + (-z).exp()));
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x).map(|z| if z > T::zero() { z } else { z * slope });
        self.push(v, Op::LeakyRelu(x, slope), &[x])
    }

    /// Per-pixel queries `q[n, d, h, w]` attending over tokens `k[n, l, d]`, `v[n, l, c]`.
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Result<Var> {
        let o = attention::attention_forward(self.value(q), self.value(k), self.value(v), scale)?;
        Ok(self.push(
            o.out,
            Op::Attention {
                q,
                k,
                v,
                weights: o.weights,
                scale,
            },
            &[q, k, v],
        ))
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "nothing to concatenate");
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total = 0;
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return shape_err("concat", format!("[{xn}, _, {xh}, {xw}] vs [{n}, _, {h}, {w}]"));
            }
            total += xc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &x in xs {
                out.extend_from_slice(self.value(x).item(b));
            }
        }
        let out = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let dst = out.data_mut();
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(plane * 2 * h + y) * 2 * w + xx] = src[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    /// Zero-pads bottom/right up to `h x w`.
    pub fn pad_to(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, xh, xw) = self.value(x).dims4()?;
        if h < xh || w < xw {
            return shape_err("pad_to", format!("cannot pad {xh}x{xw} down to {h}x{w}"));
        }
        let out = reframe(self.value(x), n * c, xh, xw, h, w);
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::PadTo(x), &[x]))
    }

    /// Keeps the top-left `h x w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, xh, xw) = self.value(x).dims4()?;
        if h > xh || w > xw {
            return shape_err("crop", format!("cannot crop {xh}x{xw} to {h}x{w}"));
        }
        let out = reframe(self.value(x), n * c, xh, xw, h, w);
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::Crop(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        self.check_target("mse", x, &target)?;
        let n = T::lit(target.numel() as f64);
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(x, target), &[x]))
    }

    /// Mean absolute error against a constant target.
    pub fn l1(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        self.check_target("l1", x, &target)?;
        let n = T::lit(target.numel() as f64);
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::L1(x, target), &[x]))
    }

    /// Mean binary cross-entropy of logits against a constant label.
    pub fn bce_with_logits(&mut self, x: Var, label: T) -> Var {
        let xs = self.value(x);
        let n = T::lit(xs.numel() as f64);
        let s: T = xs
            .data()
            .iter()
            .map(|&z| z.max(T::zero()) - z * label + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        self.push(Tensor::scalar(s / n), Op::BceLogits(x, label), &[x])
    }

    /// `Σ x ⊙ weights`, a scalar probe used by gradient checks.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        self.check_target("dot", x, &weights)?;
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights), &[x]))
    }

    fn check_target(&self, op: &'static str, x: Var, target: &Tensor<T>) -> Result<()> {
        if self.value(x).shape() != target.shape() {
            return shape_err(op, format!("{:?} vs target {:?}", self.value(x).shape(), target.shape()));
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.track && self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape(), d)?);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddChannel(x, e) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*e) {
                    let (n, c, h, w) = g.dims4()?;
                    let de: Vec<T> = g.data().chunks(h * w).map(|ch| ch.iter().copied().sum()).collect();
                    self.accumulate(grads, *e, Tensor::new(&[n, c], de)?);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let cg = conv::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.wants(*x))?;
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, cg.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, cg.db);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.value(*x).dims2()?;
                let (o, _) = self.value(*w).dims2()?;
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(&[m, k]);
                    matmul(m, o, k, T::one(), g.data(), false, self.value(*w).data(), false, T::zero(), dx.data_mut());
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(&[o, k]);
                    matmul(o, m, k, T::one(), g.data(), true, self.value(*x).data(), false, T::zero(), dw.data_mut());
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = Tensor::zeros(&[o]);
                    for row in g.data().chunks(o) {
                        for (d, &r) in db.data_mut().iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let gg = norm::group_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    self.value(*beta),
                    *groups,
                    mean,
                    rstd,
                    g,
                )?;
                self.accumulate(grads, *x, gg.dx);
                self.accumulate(grads, *gamma, gg.dgamma);
                self.accumulate(grads, *beta, gg.dbeta);
            }
            Op::Silu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&z, &gz)| {
                        let s = T::one() / (T::one() + (-z).exp());
                        gz * s * (T::one() + z * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::LeakyRelu(x, slope) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&z, &gz)| if z > T::zero() { gz } else { gz * *slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Attention {
                q,
                k,
                v,
                weights,
                scale,
            } => {
                let ag = attention::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    weights,
                    *scale,
                    g,
                )?;
                self.accumulate(grads, *q, ag.dq);
                self.accumulate(grads, *k, ag.dk);
                self.accumulate(grads, *v, ag.dv);
            }
            Op::Concat(xs) => {
                let (n, _, h, w) = g.dims4()?;
                let hw = h * w;
                let total = g.shape()[1];
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total + offset) * hw;
                            d.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        self.accumulate(grads, x, Tensor::new(self.value(x).shape(), d)?);
                    }
                    offset += c;
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let src = g.data();
                let dst = d.data_mut();
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(plane * h + y / 2) * w + xx / 2] += src[(plane * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::PadTo(x) | Op::Crop(x) => {
                let (n, c, xh, xw) = self.value(*x).dims4()?;
                let (_, _, gh, gw) = g.dims4()?;
                let d = reframe(g, n * c, gh, gw, xh, xw);
                self.accumulate(grads, *x, Tensor::new(&[n, c, xh, xw], d)?);
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, d);
            }
            Op::Mse(x, target) => {
                let s = g.data()[0] * T::lit(2.0) / T::lit(target.numel() as f64);
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| (a - b) * s)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(target.shape(), d)?);
            }
            Op::L1(x, target) => {
                let s = g.data()[0] / T::lit(target.numel() as f64);
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| {
                        if a > b {
                            s
                        } else if a < b {
                            -s
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(target.shape(), d)?);
            }
            Op::BceLogits(x, label) => {
                let xs = self.value(*x);
                let s = g.data()[0] / T::lit(xs.numel() as f64);
                let d = xs
                    .data()
                    .iter()
                    .map(|&z| (T::one() / (T::one() + (-z).exp()) - *label) * s)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xs.shape(), d)?);
            }
            Op::Dot(x, weights) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * s));
            }
        }
        Ok(())
    }
}

/// Copies the overlapping top-left window of `planes` images from `h x w` into `nh x nw`.
fn reframe<T: Real>(src: &Tensor<T>, planes: usize, h: usize, w: usize, nh: usize, nw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * nh * nw];
    let (ch, cw) = (h.min(nh), w.min(nw));
    for p in 0..planes {
        for y in 0..ch {
            let s = (p * h + y) * w;
            let d = (p * nh + y) * nw;
            out[d..d + cw].copy_from_slice(&src.data()[s..s + cw]);
        }
    }
    out
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Gradients indexed by parameter id; unused parameters map to `None`.
    pub fn for_params(&self, count: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..count).map(|_| None).collect();
        for &(id, v) in &self.params {
            if id.0 < count {
                out[id.0] = self.get(v).cloned();
            }
        }
        out
    }
}

//! Cross-attention from per-pixel queries to a short token sequence.
//!
//! Queries `q: [n, d, h, w]`, keys `k: [n, l, d]`, values `v: [n, l, c]`.
//! Output `[n, c, h, w]` where each pixel receives `softmax(q·kᵀ·scale)·v`.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub struct AttentionOut<T> {
    pub out: Tensor<T>,
    /// Row-stochastic weights, `[n, h*w, l]`.
    pub weights: Vec<T>,
}

fn dims<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, d, h, w) = q.dims4()?;
    let (kn, l, kd) = k.dims3()?;
    let (vn, vl, c) = v.dims3()?;
    if kn != n || vn != n {
        return shape_err("cross_attention", format!("batch sizes {n}/{kn}/{vn} differ"));
    }
    if kd != d {
        return shape_err("cross_attention", format!("query width {d} != key width {kd}"));
    }
    if vl != l || l == 0 {
        return shape_err("cross_attention", format!("{l} keys but {vl} values"));
    }
    Ok((n, d, h * w, l, c, w))
}

pub fn attention_forward<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, scale: T) -> Result<AttentionOut<T>> {
    let (n, d, p, l, c, _) = dims(q, k, v)?;
    let (_, _, h, w) = q.dims4()?;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut weights = vec![T::zero(); n * p * l];
    let mut scores = vec![T::zero(); l];
    for b in 0..n {
        let qb = q.item(b);
        let kb = &k.data()[b * l * d..(b + 1) * l * d];
        let vb = &v.data()[b * l * c..(b + 1) * l * c];
        let ob = &mut out.data_mut()[b * c * p..(b + 1) * c * p];
        for px in 0..p {
            let mut max = T::neg_infinity();
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = T::zero();
                for dd in 0..d {
                    acc += qb[dd * p + px] * kb[j * d + dd];
                }
                *s = acc * scale;
                if *s > max {
                    max = *s;
                }
            }
            let mut z = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let a = &mut weights[(b * p + px) * l..(b * p + px + 1) * l];
            for (aj, &s) in a.iter_mut().zip(&scores) {
                *aj = s / z;
            }
            for ch in 0..c {
                let mut acc = T::zero();
                for (j, &aj) in a.iter().enumerate() {
                    acc += aj * vb[j * c + ch];
                }
                ob[ch * p + px] = acc;
            }
        }
    }
    Ok(AttentionOut { out, weights })
}

pub struct AttentionGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
}

pub fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    weights: &[T],
    scale: T,
    dout: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let (n, d, p, l, c, _) = dims(q, k, v)?;
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut da = vec![T::zero(); l];
    for b in 0..n {
        let qb = q.item(b);
        let kb = &k.data()[b * l * d..(b + 1) * l * d];
        let vb = &v.data()[b * l * c..(b + 1) * l * c];
        let gb = dout.item(b);
        for px in 0..p {
            let a = &weights[(b * p + px) * l..(b * p + px + 1) * l];
            // dA and dV
            for (j, daj) in da.iter_mut().enumerate() {
                let mut acc = T::zero();
                for ch in 0..c {
                    let g = gb[ch * p + px];
                    acc += g * vb[j * c + ch];
                    dv.data_mut()[(b * l + j) * c + ch] += a[j] * g;
                }
                *daj = acc;
            }
            // softmax backward: dS = A ⊙ (dA − Σ A dA)
            let dot: T = a.iter().zip(&da).map(|(&x, &y)| x * y).sum();
            for j in 0..l {
                let ds = a[j] * (da[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                for dd in 0..d {
                    dq.data_mut()[(b * d + dd) * p + px] += ds * kb[j * d + dd];
                    dk.data_mut()[(b * l + j) * d + dd] += ds * qb[dd * p + px];
                }
            }
        }
    }
    Ok(AttentionGrads { dq, dk, dv })
}

//! Group normalization over `[n, c, h, w]`.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub struct GroupNormOut<T> {
    pub y: Tensor<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn check<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, groups: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return shape_err("group_norm", format!("{c} channels not divisible into {groups} groups"));
    }
    if gamma.numel() != c || beta.numel() != c {
        return shape_err("group_norm", format!("affine params must have {c} entries"));
    }
    Ok((n, c, h * w))
}

pub fn group_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: T,
) -> Result<GroupNormOut<T>> {
    let (n, c, hw) = check(x, gamma, beta, groups)?;
    let cpg = c / groups;
    let m = T::lit((cpg * hw) as f64);
    let mut y = Tensor::zeros(x.shape());
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for b in 0..n {
        for g in 0..groups {
            let lo = (b * c + g * cpg) * hw;
            let hi = lo + cpg * hw;
            let xs = &x.data()[lo..hi];
            let mu = xs.iter().copied().sum::<T>() / m;
            let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / m;
            let r = T::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(r);
            let ys = &mut y.data_mut()[lo..hi];
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for (o, &v) in ys[ci * hw..(ci + 1) * hw].iter_mut().zip(&xs[ci * hw..(ci + 1) * hw]) {
                    *o = (v - mu) * r * ga + be;
                }
            }
        }
    }
    Ok(GroupNormOut { y, mean, rstd })
}

pub struct GroupNormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    mean: &[T],
    rstd: &[T],
    dy: &Tensor<T>,
) -> Result<GroupNormGrads<T>> {
    let (n, c, hw) = check(x, gamma, beta, groups)?;
    let cpg = c / groups;
    let m = T::lit((cpg * hw) as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for b in 0..n {
        for g in 0..groups {
            let idx = b * groups + g;
            let (mu, r) = (mean[idx], rstd[idx]);
            let lo = (b * c + g * cpg) * hw;
            let xs = &x.data()[lo..lo + cpg * hw];
            let dys = &dy.data()[lo..lo + cpg * hw];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let ga = gamma.data()[ch];
                let mut dg = T::zero();
                let mut dbt = T::zero();
                for (&v, &d) in xs[ci * hw..(ci + 1) * hw].iter().zip(&dys[ci * hw..(ci + 1) * hw]) {
                    let xhat = (v - mu) * r;
                    dg += d * xhat;
                    dbt += d;
                    sum_dxhat += d * ga;
                    sum_dxhat_xhat += d * ga * xhat;
                }
                dgamma.data_mut()[ch] += dg;
                dbeta.data_mut()[ch] += dbt;
            }
            let dxs = &mut dx.data_mut()[lo..lo + cpg * hw];
            for ci in 0..cpg {
                let ga = gamma.data()[g * cpg + ci];
                for j in ci * hw..(ci + 1) * hw {
                    let xhat = (xs[j] - mu) * r;
                    let dxhat = dys[j] * ga;
                    dxs[j] = r / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    Ok(GroupNormGrads { dx, dgamma, dbeta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_each_group_to_zero_mean_unit_variance() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 3, 3], |i| (i as f64 * 0.91).sin() * 3.0 + 1.0);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let out = group_norm_forward(&x, &gamma, &beta, 2, 0.0).unwrap();
        for chunk in out.y.data().chunks(2 * 9) {
            let mu: f64 = chunk.iter().sum::<f64>() / 18.0;
            let var: f64 = chunk.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 18.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_indivisible_groups() {
        let x = Tensor::<f32>::zeros(&[1, 6, 2, 2]);
        let p = Tensor::<f32>::zeros(&[6]);
        assert!(group_norm_forward(&x, &p, &p, 4, 1e-5).is_err());
    }
}

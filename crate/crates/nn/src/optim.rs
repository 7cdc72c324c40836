use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores a previously saved optimiser state.
    pub fn from_state(config: AdamConfig, steps: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, store: &ParamStore<T>) -> Result<Self> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(NnError::Invalid("optimizer state does not match parameters".into()));
        }
        for ((mm, vv), (_, name, p)) in m.iter().zip(&v).zip(store.iter()) {
            if mm.shape() != p.shape() || vv.shape() != p.shape() {
                return Err(NnError::Invalid(format!("optimizer moment shape mismatch for {name}")));
            }
        }
        Ok(Self { config, steps, m, v })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let p = store.get_mut(crate::params::ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        let g = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        adam.step(&mut store, &[Some(g)]);
        let w = store.get(crate::params::ParamId(0)).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[1], vec![5.0]).unwrap());
        let mut adam = Adam::new(AdamConfig { lr: 0.1, beta1: 0.5, ..Default::default() }, &store);
        for _ in 0..500 {
            let w = store.get(id).data()[0];
            adam.step(&mut store, &[Some(Tensor::scalar(2.0 * (w - 2.0)))]);
        }
        assert!((store.get(id).data()[0] - 2.0).abs() < 1e-2);
    }
}

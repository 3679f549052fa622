use std::collections::BTreeMap;

use super::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optimizer hyperparameters. Defaults are the published training
/// settings: learning rate 5e-5 and weight decay 3e-6.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-5, weight_decay: 3e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    /// Applies one update to every parameter in `params`, which must all
    /// carry a gradient.
    pub fn step(&mut self, params: &[&Parameter<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::of(c.lr);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bias1 = T::of(1.0 - c.beta1.powi(t));
        let bias2 = T::of(1.0 - c.beta2.powi(t));
        let eps = T::of(c.eps);
        for p in params {
            let g = p.tensor.grad().expect("checked above");
            let n = g.len();
            let mom = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
            let mut w = p.tensor.data_mut();
            for i in 0..n {
                mom.m[i] = b1 * mom.m[i] + (T::one() - b1) * g[i];
                mom.v[i] = b2 * mom.v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = mom.m[i] / bias1;
                let v_hat = mom.v[i] / bias2;
                w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &[&Parameter<T>], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .map(|g| g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let f = T::of(max_norm / total);
        params.iter().for_each(|p| p.tensor.scale_grad(f));
    }
    total
}

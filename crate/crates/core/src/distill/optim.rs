use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{fnv1a, ParamStore, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled; zero keeps untouched parameters exactly in place.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// AdamW state; moments are created lazily per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(hyper: AdamWConfig) -> Self {
        Self { hyper, step: 0, moments: BTreeMap::new() }
    }

    /// One AdamW step over `grads` (name → flat gradient) at learning rate
    /// `lr`. Gradients are pre-multiplied by `grad_scale` (clipping).
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[(String, Vec<T>)], lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(h.beta1), T::from_f64_lossy(h.beta2));
        let (one, gs) = (T::one(), T::from_f64_lossy(grad_scale));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(h.eps);
        let decay = T::from_f64_lossy(1.0 - lr * h.weight_decay);
        for (name, grad) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::contract(format!("optimizer: unknown parameter {name}")))?;
            if p.numel() != grad.len() {
                return Err(Error::dim(format!("optimizer: {name} has {} elements, gradient {}", p.numel(), grad.len())));
            }
            let mo = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: Tensor::zeros(p.shape().to_vec()), v: Tensor::zeros(p.shape().to_vec()) });
            if mo.m.shape() != p.shape() {
                return Err(Error::dim(format!("optimizer: moment shape of {name} changed")));
            }
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = grad[i] * gs;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                if h.weight_decay != 0.0 {
                    *x = *x * decay;
                }
                *x = *x - step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Hash over the step counter and every moment buffer.
    pub fn checksum(&self) -> u64 {
        let mut bytes = self.step.to_le_bytes().to_vec();
        for (name, mo) in &self.moments {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&mo.m.checksum().to_le_bytes());
            bytes.extend_from_slice(&mo.v.checksum().to_le_bytes());
        }
        fnv1a(&bytes)
    }
}

/// Linear warmup to `peak`, then cosine decay to `min_ratio·peak` at
/// `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { peak: lr, warmup: 0, min_ratio: 1.0 }
    }

    pub fn at(&self, step: u64, total: u64) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let floor = self.peak * self.min_ratio;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Scalar>(grads: &[(String, Vec<T>)]) -> f64 {
    grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Scale factor that brings `norm` down to `max_norm`.
pub fn clip_scale(norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

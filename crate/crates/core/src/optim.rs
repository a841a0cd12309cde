//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first and second moments per parameter, and the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters flagged for decay shrink by `1 - lr * wd` before
    /// the bias-corrected Adam step. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], cfg: &AdamWConfig) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::LengthMismatch {
                what: "gradients",
                left: params.len(),
                right: grads.len(),
            });
        }
        for (p, g) in params.params().iter().zip(grads) {
            if g.shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.m.is_empty() {
            self.m = params.params().iter().map(|p| alloc::vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        for (((p, g), m), v) in params
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let shrink = if p.decay { 1.0 - cfg.lr * cfg.weight_decay } else { 1.0 };
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] = data[i] * shrink - cfg.lr * mh / (libm::sqrt(vh) + cfg.eps);
            }
        }
        Ok(())
    }
}

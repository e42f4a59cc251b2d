//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup-plus-cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Hyperparameters of the first pretraining stage.
    pub fn pretrain() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }

    /// Hyperparameters shared by every stage after pretraining.
    pub fn finetune() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-5, weight_decay: 0.1 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Optimizer state: the step counter plus first/second moments per parameter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `ids` from its gradient slot.
    ///
    /// Weight decay is applied to the parameter before the Adam delta:
    /// `p -= lr * wd * p`, then `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for &id in ids {
            let p = store.get_mut(id);
            let mo = self.moments.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            if mo.m.shape() != p.value.shape() {
                return Err(shape_err!("optimizer moments for {} have stale shape", p.name));
            }
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            let g = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales the gradients of `ids` so their global L2 norm is at most
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = global_grad_norm(store, ids);
    if norm > max_norm {
        let s = max_norm / norm;
        for &id in ids {
            for g in store.get_mut(id).grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

pub fn global_grad_norm(store: &ParamStore, ids: &[ParamId]) -> f64 {
    ids.iter().map(|&id| store.get(id).grad.norm_sq()).sum::<f64>().sqrt()
}

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        let Self { peak_lr, min_lr, warmup_steps, total_steps } = *self;
        if step >= total_steps {
            return min_lr;
        }
        if step < warmup_steps {
            return peak_lr * step as f64 / warmup_steps as f64;
        }
        let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + (PI * progress).cos())
    }
}

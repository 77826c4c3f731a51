use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
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

/// One bias-corrected Adam update of a single tensor. `step` is the
/// 1-based index of this update.
pub fn adam_update<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    step: u64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powf(step as f64));
    let c2 = T::of(1.0 - cfg.beta2.powf(step as f64));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let p = param.data_mut().iter_mut();
    for (((p, &g), m), v) in p.zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam state for a whole parameter tree.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Applies one update. Fails without touching anything if a gradient is
    /// not finite.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        if let Some((name, _)) = grads.entries().into_iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.step += 1;
        let slots = params
            .slots_mut()
            .into_iter()
            .zip(grads.entries())
            .zip(self.m.slots_mut())
            .zip(self.v.slots_mut());
        for (((p, (_, g)), m), v) in slots {
            adam_update(p, g, m, v, self.step, &self.config);
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grads
        .entries()
        .iter()
        .map(|(_, g)| g.sum_of_squares())
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.slots_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

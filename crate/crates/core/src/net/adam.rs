use serde::{Deserialize, Serialize};

use super::params::{Gradients, ModelParams};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place; `step` is 1-based.
pub fn adam_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let c1 = T::lit(1.0 - cfg.beta1.powf(step as f64));
    let c2 = T::lit(1.0 - cfg.beta2.powf(step as f64));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state alongside the parameters it updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub epoch: usize,
    pub rng_seed: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: ModelParams<T>, rng_seed: u64) -> Self {
        let zeros: Vec<Vec<T>> = params
            .trainable()
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        Self {
            params,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            epoch: 0,
            rng_seed,
        }
    }

    pub fn adam_step(&mut self, grads: &Gradients<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        if grads.tensors.len() != self.m.len() {
            return Err(Error::Shape("gradient tensor count".into()));
        }
        self.step += 1;
        let step = self.step;
        for (((p, g), m), v) in self
            .params
            .trainable_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.len() != g.len() {
                return Err(Error::Shape("gradient tensor size".into()));
            }
            adam_update(p, g, m, v, step, lr, cfg);
        }
        Ok(())
    }
}

/// Constant learning rate followed by a geometric decay over the final
/// epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub total_epochs: usize,
    pub decay_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            final_lr: 1e-6,
            total_epochs: 50,
            decay_epochs: 10,
        }
    }
}

impl LrSchedule {
    /// Same shape as the default schedule compressed to `total_epochs`: the
    /// last fifth of training decays.
    pub fn compressed(total_epochs: usize) -> Self {
        let decay = total_epochs.div_ceil(5).min(total_epochs);
        Self {
            total_epochs,
            decay_epochs: decay,
            ..Self::default()
        }
    }

    pub fn decay_start(&self) -> usize {
        self.total_epochs.saturating_sub(self.decay_epochs)
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let start = self.decay_start();
        if epoch < start || self.decay_epochs == 0 {
            return self.base_lr;
        }
        let frac = ((epoch - start) as f64 / self.decay_epochs as f64).min(1.0);
        self.base_lr * (self.final_lr / self.base_lr).powf(frac)
    }
}

/// Learning rate of the default 50-epoch schedule.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().lr(epoch)
}

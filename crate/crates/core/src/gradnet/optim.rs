use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::real::Real;
use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one slot per parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}

/// One bias-corrected Adam update over every trainable, unfrozen parameter
/// holding a gradient. Frozen parameters and buffers are never touched.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::BadConfig(format!("learning rate must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - Float::powi(beta1, t);
    let bc2 = 1.0 - Float::powi(beta2, t);
    if state.moments.len() < params.len() {
        state.moments.resize(params.len(), None);
    }
    let (b1, b2) = (T::cst(beta1), T::cst(beta2));
    let (one, lr_t, eps_t) = (T::one(), T::cst(lr), T::cst(eps));
    let (inv_bc1, inv_bc2) = (T::cst(1.0 / bc1), T::cst(1.0 / bc2));
    for (p, slot) in params.iter_mut().zip(state.moments.iter_mut()) {
        if !p.wants_grad() {
            continue;
        }
        let Some(g) = p.grad.as_ref() else { continue };
        let n = p.tensor.numel();
        if g.len() != n {
            return Err(Error::ShapeMismatch(format!("gradient of {} has {} values, expected {n}", p.name, g.len())));
        }
        let (m, v) = slot.get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi * inv_bc1;
            let vhat = *vi * inv_bc2;
            *w -= lr_t * mhat / (vhat.sqrt() + eps_t);
        }
    }
    Ok(())
}

/// Triangular learning-rate wave starting at the cycle maximum, dipping to
/// `lr_min` mid-cycle; the maximum decays geometrically from cycle to cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CyclicLrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_len_steps: u64,
    pub decay_per_cycle: f64,
}

impl Default for CyclicLrSchedule {
    fn default() -> Self {
        Self { lr_max: 1e-3, lr_min: 1e-7, cycle_len_steps: 100, decay_per_cycle: 1e-4 }
    }
}

impl CyclicLrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) || self.cycle_len_steps == 0 {
            return Err(Error::BadConfig(format!("invalid cyclic schedule {self:?}")));
        }
        if !(0.0..1.0).contains(&self.decay_per_cycle) {
            return Err(Error::BadConfig("decay per cycle must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Upper bound of cycle `c`.
    pub fn cycle_max(&self, cycle: u64) -> f64 {
        self.lr_max * Float::powi(1.0 - self.decay_per_cycle, cycle.min(i32::MAX as u64) as i32)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let len = self.cycle_len_steps.max(1);
        let cycle = step / len;
        let phase = (step % len) as f64 / len as f64;
        let top = self.cycle_max(cycle).max(self.lr_min);
        self.lr_min + (top - self.lr_min) * Float::abs(2.0 * phase - 1.0)
    }
}

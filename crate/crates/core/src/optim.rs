use std::f64::consts::PI;

use glean_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GleanError, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }

    /// One bias-corrected update at step `t` (1-based).
    pub fn update(&mut self, cfg: &AdamConfig, value: &mut [f32], grad: &[f32], lr: f32, t: u64) {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (((p, &g), m), v) in value.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Adam over the trainable parameters of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    states: Vec<Option<AdamState>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, states: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. Gradients for a non-trainable parameter are a bug in
    /// the caller and are refused rather than silently applied.
    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<(ParamId, Tensor)>, lr: f32) -> Result<()> {
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        if let Some((id, _)) = grads.iter().find(|(id, _)| !store.is_trainable(*id)) {
            return Err(GleanError::ContractViolation(format!(
                "optimizer received a gradient for frozen parameter {}",
                store.name(*id)
            )));
        }
        self.t += 1;
        for (id, g) in grads {
            let value = store.get_mut(id);
            let idx = id.index();
            let state = self.states[idx].get_or_insert_with(|| AdamState::new(value.numel()));
            state.update(&self.cfg, value.data_mut(), g.data(), lr, self.t);
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_init` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if step > total {
        return Err(invalid(format!("step {step} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr_init);
    }
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * step as f64 / total as f64).cos()))
}

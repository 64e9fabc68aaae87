//! Adam with a cosine-annealed learning rate, and the EMA teacher update.

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Anneal the rate to zero over the phase's iteration budget.
    pub cosine: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            cosine: true,
        }
    }
}

/// First and second moments plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &ModelParams) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }
}

/// Learning rate for 0-based `step` of `total` steps.
pub fn cosine_lr(cfg: &AdamConfig, step: u64, total: u64) -> f64 {
    if !cfg.cosine || total == 0 {
        return cfg.learning_rate;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One bias-corrected Adam update on flat slices; `t` is the 1-based step.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((w, &g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Applies one step to every tensor; `total_steps` sets the cosine horizon.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
    total_steps: u64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(Error::ShapeMismatch(
            "parameter, gradient, and moment shapes differ".into(),
        ));
    }
    for (name, g) in grads.tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    let lr = cosine_lr(cfg, state.step, total_steps);
    state.step += 1;
    let t = state.step;
    let AdamState { m, v, .. } = state;
    for ((((_, w), (_, g)), (_, mi)), (_, vi)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        adam_update(w, g, mi, vi, t, lr, cfg);
    }
    Ok(())
}

/// `tau * teacher + (1 - tau) * student`, elementwise.
pub fn ema_update_params(teacher: &ModelParams, student: &ModelParams, tau: f64) -> Result<ModelParams> {
    if !teacher.same_shape(student) {
        return Err(Error::ShapeMismatch("teacher and student shapes differ".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("tau must be in [0, 1], got {tau}")));
    }
    let mut out = teacher.clone();
    for ((_, t), (_, s)) in out.tensors_mut().into_iter().zip(student.tensors()) {
        t.iter_mut().zip(s).for_each(|(a, &b)| *a = tau * *a + (1.0 - tau) * b);
    }
    Ok(out)
}

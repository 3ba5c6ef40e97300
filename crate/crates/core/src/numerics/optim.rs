//! Flat-vector optimizer steps (SGD and Adam).

use serde::{Deserialize, Serialize};

/// Adam hyperparameters. Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers plus the step counter for Adam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        Self { m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0 }
    }
}

/// In-place `w -= lr * g`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    assert_eq!(params.len(), grad.len(), "sgd_step: shape mismatch");
    for (w, &g) in params.iter_mut().zip(grad) {
        *w -= lr * g;
    }
}

/// In-place bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, hp: &AdamParams) {
    assert_eq!(params.len(), grad.len(), "adam_step: shape mismatch");
    assert_eq!(params.len(), state.m.len(), "adam_step: state mismatch");
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

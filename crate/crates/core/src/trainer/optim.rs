use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::tensor::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub config: AdamWConfig,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = params.clone();
        for id in params.ids() {
            m.tensor_mut(id).data_mut().fill(0.0);
        }
        Self {
            v: m.clone(),
            m,
            step: 0,
            config: AdamWConfig::default(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
///
/// Only parameters present in `grads` move; the others keep their values
/// and moments.
pub fn optimizer_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, lr: f64, wd: f64) {
    state.step += 1;
    let AdamWConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (id, g) in grads.iter() {
        let p = params.tensor_mut(id).data_mut();
        let m = state.m.tensor_mut(id).data_mut();
        for ((pi, mi), gi) in p.iter_mut().zip(m.iter_mut()).zip(g.data()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *pi *= 1.0 - lr * wd;
        }
        let v = state.v.tensor_mut(id).data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        }
        let m = state.m.tensor(id).data();
        let v = state.v.tensor(id).data();
        let p = params.tensor_mut(id).data_mut();
        for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
            *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        }
    }
}

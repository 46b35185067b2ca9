use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight decay applied straight to the parameters (AdamW style).
    pub decoupled_decay: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled_decay: 0.0,
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decoupled_decay = decay;
        self
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "adam: {n} params, {} grads, {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    if state.decoupled_decay < 0.0 {
        return Err(Error::arg("negative weight decay"));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let decay = state.decoupled_decay * params[i];
        params[i] -= lr * (m_hat / (v_hat.sqrt() + state.eps) + decay);
    }
    Ok(())
}

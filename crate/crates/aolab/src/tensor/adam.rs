//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates for one parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update in place. `step` is 1-based and shared across buffers.
///
/// Rejects non-finite gradients before mutating anything, so a poisoned step
/// leaves parameters and moments untouched.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
    step: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            step,
        });
    }
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for i in 0..params.len() {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grads[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * params[i]);
    }
    Ok(())
}

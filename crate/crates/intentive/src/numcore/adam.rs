use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Adam optimizer state for a fixed, ordered parameter list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One Adam update with bias correction. `params` and `grads` must line
/// up with the sizes the state was built with.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, p) in params.iter().enumerate() {
        if p.len() != grads[i].len() || p.len() != state.m[i].len() {
            return Err(Error::Dimension {
                op: "adam_step",
                detail: format!(
                    "param {i}: {} values, grad {}, moments {}",
                    p.len(),
                    grads[i].len(),
                    state.m[i].len()
                ),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, g) in grads[i].iter().enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.data[j] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

use serde::{Deserialize, Serialize};

use super::{s, Scalar};
use crate::{Error, Result};

/// Adam with coupled L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState<S> {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<S>,
    #[serde(skip)]
    pub v: Vec<S>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(n_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
        }
    }

    pub fn reset_moments(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|x| *x = S::zero());
        self.v.iter_mut().for_each(|x| *x = S::zero());
    }
}

/// One bias-corrected Adam update. `decay_mask[i]` selects parameters that
/// receive the L2 term `weight_decay * p` in their gradient.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grad: &[S],
    decay_mask: &[bool],
    state: &mut OptimState<S>,
) -> Result<()> {
    let n = params.len();
    if grad.len() != n || decay_mask.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "adam: params {n}, grad {}, mask {}, moments {}/{}",
            grad.len(),
            decay_mask.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2): (S, S) = (s(state.beta1), s(state.beta2));
    let c1: S = s(1.0 - state.beta1.powi(t));
    let c2: S = s(1.0 - state.beta2.powi(t));
    let lr: S = s(state.learning_rate);
    let wd: S = s(state.weight_decay);
    let eps: S = s(state.epsilon);
    for i in 0..n {
        let mut g = grad[i];
        if decay_mask[i] {
            g = g + wd * params[i];
        }
        let m = b1 * state.m[i] + (S::one() - b1) * g;
        let v = b2 * state.v[i] + (S::one() - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mhat = m / c1;
        let vhat = v / c2;
        params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

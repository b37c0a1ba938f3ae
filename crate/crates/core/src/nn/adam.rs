use serde::{Deserialize, Serialize};

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, t: u64, lr: f64, hp: &AdamParams) {
    assert!(t >= 1, "Adam step counter starts at 1");
    debug_assert_eq!(params.len(), grads.len());
    let c1 = 1.0 - hp.beta1.powf(t as f64);
    let c2 = 1.0 - hp.beta2.powf(t as f64);
    let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - hp.beta1), T::from_f64(1.0 - hp.beta2));
    let step = T::from_f64(lr / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(hp.eps);
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + one_b1 * g;
        let v = b2 * state.v[i] + one_b2 * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] = params[i] - step * m / ((v * inv_c2).sqrt() + eps);
    }
}

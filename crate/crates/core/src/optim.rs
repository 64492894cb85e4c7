//! ADAM optimizer state and a central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First/second moment accumulators plus hyperparameters for one parameter
/// tensor. Defaults: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], lr: f64) -> AdamState {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update. Returns the new parameters and state.
pub fn adam_step(param: &Tensor, grad: &Tensor, st: &AdamState) -> Result<(Tensor, AdamState)> {
    if param.shape() != grad.shape() || param.shape() != st.m.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", param.shape()),
            got: format!("grad {:?}, state {:?}", grad.shape(), st.m.shape()),
        });
    }
    let mut next = st.clone();
    next.t = st.t + 1;
    let t = next.t as i32;
    let bc1 = 1.0 - next.beta1.powi(t);
    let bc2 = 1.0 - next.beta2.powi(t);
    let mut out = param.clone();
    for i in 0..param.len() {
        let g = grad.data()[i];
        let m = next.beta1 * st.m.data()[i] + (1.0 - next.beta1) * g;
        let v = next.beta2 * st.v.data()[i] + (1.0 - next.beta2) * g * g;
        next.m.data_mut()[i] = m;
        next.v.data_mut()[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        out.data_mut()[i] -= next.lr * m_hat / (v_hat.sqrt() + next.epsilon);
    }
    Ok((out, next))
}

/// Central-difference gradient of a scalar function:
/// `g_i = (f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn finite_diff_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad requires h > 0");
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

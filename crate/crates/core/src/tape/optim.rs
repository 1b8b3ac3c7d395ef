use super::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Plain gradient descent, `θ ← θ − lr·∇θ`.
pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, lr: T) -> Result<()> {
    for p in params.iter() {
        if p.grad.is_none() {
            return Err(Error::MissingGrad(p.name.clone()));
        }
    }
    for p in params.iter_mut() {
        let g = p.grad.as_ref().expect("checked above");
        for (v, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v = *v - lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

pub fn adam_step<T: Real>(params: &mut ParamSet<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    for p in params.iter() {
        if p.grad.is_none() {
            return Err(Error::MissingGrad(p.name.clone()));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() {
        return Err(Error::ParamMismatch(format!(
            "adam state for {} params, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::one() - T::of(cfg.beta1.powi(state.t as i32));
    let bc2 = T::one() - T::of(cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.as_ref().expect("checked above");
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Parameter { value, grad: None }
    }

    pub fn accumulate(&mut self, grad: &[T]) {
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += *b),
            slot => *slot = Some(grad.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Moment estimates and hyperparameters of the Adam optimiser.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }
}

/// One bias-corrected Adam update over `params`, in order.
///
/// Moments are created lazily on the first call and must keep matching the
/// parameter list afterwards.
pub fn adam_step<T: Real>(params: &mut [&mut Parameter<T>], state: &mut AdamState<T>) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(Error::usage(format!("adam_step: parameter {i} has no gradient")));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len()
        || params.iter().zip(&state.first).any(|(p, m)| p.value.numel() != m.len())
    {
        return Err(Error::usage("adam_step: parameter list changed between steps"));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let c1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let lr = T::from_f64_lossy(state.lr);
    let eps = T::from_f64_lossy(state.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let g = p.grad.as_ref().expect("checked above");
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

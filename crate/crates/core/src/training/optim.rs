use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Vec<T>> = params.into_iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

/// One AdamW update with decoupled weight decay:
/// `w -= lr * m_hat / (sqrt(v_hat) + eps) + lr * weight_decay * w`.
/// Nothing is modified when any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    config: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adamw_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shapes("adamw_step", &[p.shape(), g.shape()]));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "adamw_step gradient" });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (T::from_f64(config.beta1), T::from_f64(config.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - config.beta1), T::from_f64(1.0 - config.beta2));
    let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
    let (lr_t, eps) = (T::from_f64(lr), T::from_f64(config.eps));
    let decay = T::from_f64(lr * config.weight_decay);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi * inv_bc1;
            let v_hat = *vi * inv_bc2;
            *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *w;
        }
    }
    Ok(())
}

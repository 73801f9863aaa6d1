use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay rate.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` is `None` for parameters
/// that did not take part in the loss (treated as zero). Nothing is
/// modified if any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    names: &[String],
    grads: &[Option<&[T]>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params[i].len() {
                return Err(Error::Shape(format!("gradient of `{}` has the wrong length", names[i])));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(names[i].clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let decay = T::one() - lr * T::lit(cfg.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let values = p.values_mut();
        for k in 0..values.len() {
            let g = grads[i].map_or(T::zero(), |g| g[k]);
            m[k] = b1 * m[k] + (T::one() - b1) * g;
            v[k] = b2 * v[k] + (T::one() - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            if cfg.weight_decay != 0.0 {
                values[k] *= decay;
            }
            values[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

//! Bias-corrected Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamConfig {
    /// Settings for score tensors: larger step, never decayed.
    pub fn for_scores() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Self::default()
        }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One Adam update of `param` in place.
///
/// `decay` selects whether `cfg.weight_decay` applies; score tensors and
/// normalisation/bias vectors pass `false`.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    decay: bool,
) -> Result<(), TensorError> {
    if param.shape() != grad.shape() || state.m.shape() != param.shape() {
        return Err(TensorError::dim(
            "adam_step",
            format!("param {:?}, grad {:?}", param.shape(), grad.shape()),
        ));
    }
    state.t += 1;
    let t = state.t as f64;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powf(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powf(t));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let wd = if decay {
        T::from_f64_lossy(cfg.weight_decay)
    } else {
        T::zero()
    };
    let one = T::one();
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
    }
    Ok(())
}

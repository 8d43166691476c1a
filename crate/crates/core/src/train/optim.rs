use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Momentum buffers, one per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like<'a>(params: impl Iterator<Item = &'a Tensor>) -> Self {
        OptimizerState {
            momentum: params.map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// `base · (1 + cos(π·progress))/2`, progress in epochs over `epochs`.
pub fn cosine_lr(base: f64, progress: f64, epochs: f64) -> f64 {
    if progress >= epochs {
        return 0.0;
    }
    base * (1.0 + (PI * progress / epochs).cos()) / 2.0
}

/// Momentum SGD with decoupled-from-loss L2 weight decay:
/// `v ← μv + (g + λp)`, `p ← p − lr·v`.
pub fn sgd_step<'a>(
    params: impl Iterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut count = 0;
    for ((p, g), v) in params.zip(grads).zip(state.momentum.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
        count += 1;
    }
    if count != grads.len() || count != state.momentum.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step: {count} parameters, {} gradients, {} buffers",
            grads.len(),
            state.momentum.len()
        )));
    }
    Ok(())
}

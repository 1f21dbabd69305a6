//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_shape(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
        }
    }

    /// Updates the moments with `grad` and returns the bias-corrected step
    /// direction `m̂ / (√v̂ + ε)` for 1-based step `t`.
    pub fn direction(&mut self, grad: &Tensor<T>, t: u64, cfg: &AdamConfig) -> Result<Tensor<T>> {
        if grad.shape() != self.m.shape() {
            return Err(Error::dim("adam", self.m.shape(), grad.shape()));
        }
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
        let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
        let eps = T::of(cfg.eps);
        let mut out = Vec::with_capacity(grad.numel());
        for ((m, v), &g) in self
            .m
            .data_mut()
            .iter_mut()
            .zip(self.v.data_mut().iter_mut())
            .zip(grad.data())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            out.push(mh / (vh.sqrt() + eps));
        }
        Tensor::new(grad.shape().to_vec(), out)
    }

    /// `param ← param − lr · direction`.
    pub fn step(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, t: u64, cfg: &AdamConfig) -> Result<()> {
        let dir = self.direction(grad, t, cfg)?;
        param.axpy(T::of(-cfg.lr), &dir)
    }
}

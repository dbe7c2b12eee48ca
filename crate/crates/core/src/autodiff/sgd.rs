//! Stochastic gradient descent with classical momentum.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// `v <- momentum * v + grad; theta <- theta - lr * v`.
///
/// Velocity buffers are keyed by parameter position, so a given optimizer must
/// always be fed the same parameter list in the same order.
pub struct Sgd<F: Scalar> {
    lr: F,
    momentum: F,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: F, momentum: F) -> Self {
        // lr = 0 is allowed: it degenerates to a no-op step, which the
        // trainer's fixed-point checks rely on.
        assert!(lr >= F::zero(), "learning rate must be nonnegative");
        assert!(
            momentum >= F::zero() && momentum < F::one(),
            "momentum must lie in [0, 1)"
        );
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
        }
        for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if !param.same_shape(grad) {
                return Err(Error::ShapeMismatch {
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            let vel = &mut self.velocity[slot];
            for ((v, p), &g) in vel.iter_mut().zip(param.values_mut()).zip(grad.values()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }
}

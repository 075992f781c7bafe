use super::Tensor;
use crate::error::{AsdError, Result};
use crate::scalar::Scalar;

/// SGD with Nesterov momentum, in the common deep-learning form:
///
/// ```text
/// v <- momentum * v + g
/// p <- p - lr * (g + momentum * v)
/// ```
#[derive(Clone, Debug)]
pub struct SgdNesterov<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdNesterov<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// One update. `grads[i] = None` means the parameter received no gradient
    /// this step; it is treated as zero.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Vec<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AsdError::shape("sgd_nesterov_step", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(AsdError::shape("sgd_nesterov_step", self.velocity.len(), params.len()));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.len() != v.len() || g.as_ref().is_some_and(|g| g.len() != p.len()) {
                return Err(AsdError::shape("sgd_nesterov_step", p.len(), g.as_ref().map(Vec::len)));
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.as_ref().map_or(T::zero(), |g| g[i]);
                v[i] = self.momentum * v[i] + gi;
                data[i] -= self.lr * (gi + self.momentum * v[i]);
            }
        }
        Ok(())
    }
}

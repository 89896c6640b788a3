//! Mini-batch SGD with momentum.
//!
//! Update order: `v ← momentum·v + g`, then `w ← w − lr·v`. The gradient
//! enters the velocity unscaled.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;
use crate::{Error, Result};

/// One in-place momentum step for a single parameter.
pub fn sgd_momentum_step<T: Real>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: T, momentum: T) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            &[param.len(), grad.len()],
            &[velocity.len()],
        ));
    }
    if !(lr > T::zero()) {
        return Err(Error::Config(alloc::format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for ((w, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *w = *w - lr * *v;
    }
    Ok(())
}

/// Velocity state for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>, momentum: T) -> Self {
        Self {
            momentum,
            velocity: sizes.into_iter().map(|n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn velocity(&self, i: usize) -> &[T] {
        &self.velocity[i]
    }

    /// Applies the step to parameter `i`.
    pub fn step(&mut self, i: usize, param: &mut [T], grad: &[T], lr: T) -> Result<()> {
        sgd_momentum_step(param, grad, &mut self.velocity[i], lr, self.momentum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_momentum_steps() {
        let (mut w, mut v) = ([0.0f64], [0.0f64]);
        sgd_momentum_step(&mut w, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((w[0] + 0.1).abs() < 1e-15);
        assert_eq!(v[0], 1.0);
        let before = w[0];
        sgd_momentum_step(&mut w, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((w[0] - before + 0.19).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let (mut w, mut v) = ([2.0f64, -1.0], [0.5f64, 0.5]);
        sgd_momentum_step(&mut w, &[3.0, -4.0], &mut v, 0.01, 0.0).unwrap();
        assert!((w[0] - (2.0 - 0.03)).abs() < 1e-15);
        assert!((w[1] - (-1.0 + 0.04)).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatch_and_bad_lr() {
        let (mut w, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        assert!(sgd_momentum_step(&mut w, &[1.0], &mut v, 0.1, 0.9).is_err());
        assert!(sgd_momentum_step(&mut w, &[1.0, 1.0], &mut v, 0.0, 0.9).is_err());
    }
}

//! Dropout training and test-time Monte-Carlo dropout.
//!
//! Masks use inverted scaling: an entry is `0` with probability
//! `drop_prob` and `1/(1 − drop_prob)` otherwise, at training time and
//! at MC test time alike, so the masked input has the unmasked input as
//! its expectation. Masks are drawn per point and per channel on the
//! inputs of the selected head layers.

use alloc::vec::Vec;

use crate::arch::{ForwardMode, ForwardOutput, SegNet, HEAD_LAYERS};
use crate::autodiff::{Tape, Var};
use crate::rng::RngStream;
use crate::tensor::Real;
use crate::{Error, Result};

/// Default L2 coefficient for the dropout regime.
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// Where and how strongly to apply dropout.
///
/// `placements` index the four head layers: `0` is the 1088→512 layer,
/// `3` the final 128→m scoring layer. A mask is applied to the *input*
/// of each listed layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutSpec {
    pub placements: Vec<usize>,
    pub drop_prob: f64,
    pub weight_decay: f64,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl DropoutSpec {
    pub fn none() -> Self {
        Self {
            placements: Vec::new(),
            drop_prob: 0.0,
            weight_decay: 0.0,
        }
    }

    /// Dropout before each of the last three head layers.
    pub fn last_three(drop_prob: f64) -> Self {
        Self {
            placements: alloc::vec![1, 2, 3],
            drop_prob,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }

    /// Dropout only before the final scoring layer.
    pub fn last_only(drop_prob: f64) -> Self {
        Self {
            placements: alloc::vec![3],
            drop_prob,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Config(alloc::format!(
                "drop_prob must lie in [0, 1), got {}",
                self.drop_prob
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(alloc::format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(p) = self.placements.iter().find(|&&p| p >= HEAD_LAYERS) {
            return Err(Error::Config(alloc::format!(
                "dropout placement {p} is not a head layer (0..{HEAD_LAYERS})"
            )));
        }
        Ok(())
    }

    pub fn applies_to(&self, head_layer: usize) -> bool {
        self.drop_prob > 0.0 && self.placements.contains(&head_layer)
    }
}

/// Inverted-dropout mask of `len` entries.
pub fn sample_mask<T: Real>(len: usize, drop_prob: f64, rng: &mut RngStream) -> Vec<T> {
    if drop_prob <= 0.0 {
        return alloc::vec![T::one(); len];
    }
    let keep = T::lit(1.0 / (1.0 - drop_prob));
    (0..len)
        .map(|_| if rng.uniform() < drop_prob { T::zero() } else { keep })
        .collect()
}

/// Forward pass of a dropout-regime network. With `mc_mode` or
/// `training` set, fresh masks are drawn from `rng`; with both unset the
/// pass is deterministic and mask-free.
pub fn dropout_forward<T: Real>(
    net: &SegNet<T>,
    tape: &mut Tape<T>,
    x: Var,
    rng: &mut RngStream,
    mc_mode: bool,
    training: bool,
) -> Result<ForwardOutput<T>> {
    let mode = ForwardMode {
        train: training,
        sample: mc_mode || training,
    };
    net.forward(tape, x, rng, mode)
}

/// `weight_decay · Σ ‖p‖²` over the given parameter variables.
pub fn l2_penalty<T: Real>(tape: &mut Tape<T>, params: &[Var], weight_decay: f64) -> Result<Var> {
    if !(weight_decay >= 0.0) {
        return Err(Error::Config(alloc::format!(
            "weight_decay must be >= 0, got {weight_decay}"
        )));
    }
    let mut total: Option<Var> = None;
    for &p in params {
        let s = tape.sum_squares(p);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(crate::Tensor::scalar(T::zero())),
    };
    Ok(tape.scale(total, T::lit(weight_decay)))
}

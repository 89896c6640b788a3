//! Point-cloud semantic segmentation with frequentist, MC-dropout and
//! variational-Bayes PointNet models, plus per-point uncertainty.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure
//! computation: the tensor/autodiff substrate, the network, the
//! variational family, Monte-Carlo inference, uncertainty measures,
//! metrics, block cutting and a synthetic scene generator. File formats
//! and the command line live in the `uqcloud` crate.
//!
//! Enable the default `std` feature for runtime SIMD detection in the
//! matrix kernels.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod arch;
pub mod autodiff;
pub mod datapipe;
mod error;
pub mod inference;
pub mod mc_dropout;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;
pub mod varbayes;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Real, Tensor};

/// Number of points in every network input block.
pub const BLOCK_POINTS: usize = 4096;

/// Per-point feature width of a [`datapipe::Block`].
pub const BLOCK_FEATURES: usize = 9;

/// Channels consumed by the network (centered xyz + rgb).
pub const INPUT_CHANNELS: usize = 6;

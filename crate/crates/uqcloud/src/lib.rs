//! File formats, the training/evaluation pipeline and the command line
//! around [`uqcloud_core`].

pub mod checkpoint;
pub mod cli;
pub mod cloud_io;
pub mod dataset;
mod error;
pub mod export;
pub mod pipeline;
pub mod settings;

pub use error::{Error, Result};

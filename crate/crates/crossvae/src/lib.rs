//! File formats, the synthetic dataset, the training driver, evaluation and
//! the command line built on `crossvae-core`.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
mod error;
pub mod eval;
pub mod trainer;
pub mod vten;

pub use error::{Error, Result};

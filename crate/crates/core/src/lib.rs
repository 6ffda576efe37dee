//! Two-stage, text-conditioned video variational autoencoder.
//!
//! The first stage (`spatial`) compresses every frame 8x spatially with
//! inflated 2D convolutions plus temporal convolutions; the second stage
//! (`temporal`) compresses the frame axis 4x into a Gaussian latent. Both
//! stages may be conditioned on a caption through cross-attention
//! (`crossmodal`). Everything here is pure computation over in-memory
//! tensors; file formats, datasets and the command line live in the `crossvae`
//! crate.
//!
//! The crate is `no_std` (with `alloc`). The default `std` feature only turns
//! on runtime CPU feature detection in the matrix-multiply kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod crossmodal;
mod error;
pub mod graph;
mod kernels;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
mod real;
pub mod rng;
pub mod spatial;
pub mod temporal;
mod tensor;
pub mod text;
pub mod training;
pub mod video;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
pub use video::VideoTensor;

//! Learned point cloud geometry compression.
//!
//! A point cloud is voxelized, optionally downscaled, and partitioned into
//! `W×W×W` cubes. Every cube is pushed through a 3D convolutional
//! variational autoencoder whose latents are range coded under a Laplace
//! model conditioned on a hyperprior. The decoder recovers occupancy
//! probabilities and keeps the `k` most likely voxels, where `k` travels in
//! the bitstream as per-cube metadata.
//!
//! The numeric core is generic over [`Scalar`]: training and gradient checks
//! run at `f64`, the codec runs at `f32`. The aliases at the crate root name
//! the concrete instantiations used by the pipeline.

pub mod codec;
pub mod entropy;
mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod preprocess;
pub mod rangecoder;
mod scalar;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Activation grid at inference precision.
pub type Grid4f = tensor::Grid4<f32>;
/// Activation grid at training precision.
pub type Grid4d = tensor::Grid4<f64>;
/// Model parameters as used by the codec.
pub type ModelF32 = transforms::ModelParameters<f32>;
/// Model parameters as used by the trainer.
pub type ModelF64 = transforms::ModelParameters<f64>;
/// Adam state at training precision.
pub type AdamF64 = tensor::AdamState<f64>;

//! Engine for multiresolution fully-convolutional classification networks.
//!
//! The crate is organised bottom-up: dense rank-4 [`Tensor`]s and a seeded
//! [`rng::Rng`], raster file I/O, differentiable ops, a static data-flow
//! [`graph::Graph`], network builders in [`arch`], SGD training, windowed
//! tile inference and confusion-matrix metrics.
//!
//! All numeric code is generic over the scalar type through [`Scalar`];
//! training runs in `f32`, gradient checking in `f64`.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod metrics;
pub mod ops;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use scalar::Scalar;
pub use tensor::{Dims, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-checking-precision tensor.
pub type Tensor64 = Tensor<f64>;

pub type Result<T> = std::result::Result<T, Error>;

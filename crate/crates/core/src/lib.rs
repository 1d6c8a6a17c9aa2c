//! Normalized convolution: convolution whose im2col patches are standardized
//! before the GEMM, together with a standard convolution baseline, GroupNorm
//! and activation layers, a micro-batch SGD training loop, data loaders and
//! numerical verification tools.

pub mod activation;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod im2col;
mod linalg;
pub mod network;
pub mod norm;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod theory;

pub use activation::{Activation, ActivationKind};
pub use conv::{naive_conv2d, standardize_columns, Conv, NcConv, PatchStats, WeightInit};
pub use error::{Error, Result};
pub use im2col::{fold, unfold, ConvGeometry, Im2ColMatrix};
pub use network::{Model, ModelSpec, TrainConfig};
pub use norm::GroupNorm;
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::{matmul, randn, reduce_stats, Tensor};

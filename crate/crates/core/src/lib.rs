//! Sparse mixture-of-experts adapter lab.
//!
//! A desk-scale harness for comparing a monolithic dense FFN adapter against
//! a sparse MoE adapter (expert bank, top-k router, load-balancing loss) on
//! synthetic heterogeneous data, with reverse-mode gradients verified by
//! finite differences and diagnostics for multi-task gradient conflict
//! (pairwise gradient cosine matrices, influence scores, expert activation
//! rates).
//!
//! All numeric code is generic over the scalar type ([`Scalar`]); the
//! training pipeline and gradient checks run in `f64`, while the checkpoint
//! container also supports compact `f32` payloads.

pub mod error;
pub mod scalar;
pub mod seeds;
pub mod tensor;

pub mod adapter;
pub mod analysis;
pub mod checkpoint;
pub mod dataset;
pub mod gradcheck;
pub mod kernels;
pub mod objectives;
pub mod optim;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

/// Single-precision tensor (checkpoint payloads).
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor (training, analysis, gradient checks).
pub type Tensor64 = Tensor<f64>;

//! One-step filter pruning and recovery for small convolutional networks.
//!
//! The pipeline learns a per-channel importance vector under an L1 penalty,
//! prunes filters globally in one step while keeping a few crucial layers at
//! full width, and then recovers the pruned student by reconstructing the
//! teacher's post-activation outputs at those layers simultaneously.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod importance;
pub mod netspec;
pub mod pipeline;
pub mod pruning;
pub mod recovery;
pub mod report;
pub mod runlog;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Params32 = tensor::Params<f32>;
pub type Params64 = tensor::Params<f64>;

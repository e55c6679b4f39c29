//! Block movement pruning for small transformer encoders.
//!
//! The crate covers the whole pipeline: a dense tensor type with tape-based
//! autodiff, an encoder classifier with prunable linear layers, score-driven
//! block masks, the fine-pruning trainer, structural compaction, int8 weight
//! quantization, a binary checkpoint format and the timing/sweep harness.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod compactor;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod par;
pub mod pruning;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, TensorError};
pub use tensor::{DType, Scalar, Tensor};

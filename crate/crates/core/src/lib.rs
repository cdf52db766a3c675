//! Neural-network micro-engine in which the product inside convolution and
//! dense layers is a pluggable similarity measure, centrally the Euclid
//! similarity `-(x-w)²/2`.
//!
//! Modules:
//! - [`tensor`]: dense tensors and im2col
//! - [`similarity`]: scalar similarities, gradients, homotopy schedule
//! - [`nn`]: similarity layers, batchnorm, pooling, loss, model container
//! - [`train`]: SGD loop, cosine schedule, homotopy fine-tuning, checkpoints
//! - [`quant`]: symmetric int8 quantisation with a square lookup table
//! - [`costmodel`]: multiplier-count model for tiled multiply vs square
//! - [`robustness`]: contrast/brightness and blur sweeps
//! - [`data`]: IDX ingestion, batching, augmentation, synthetic digits

pub mod costmodel;
pub mod data;
pub mod error;
pub mod io;
pub mod nn;
pub mod parallel;
pub mod quant;
pub mod robustness;
pub mod similarity;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, ErrorClass, IdxError, Result};
pub use parallel::Exec;
pub use similarity::SimilarityKind;
pub use tensor::Tensor;

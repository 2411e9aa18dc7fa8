//! Shifted-window 3-D encoder-decoder for satellite nowcasting, built on a
//! self-contained reverse-mode autodiff tensor core.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: autodiff tensors, parameter store, gradient checking
//! - [`attention`]: windowed multi-head self/cross attention with cyclic
//!   shift, masking and relative position bias
//! - [`patch`]: patch embed / merge / expand / projection layers
//! - [`model`]: the encoder-decoder assembled from the above
//! - [`metric`]: persistence-weighted multitask score and training loss
//! - [`data`]: synthetic storm sequences, augmentation, file formats
//! - [`train`]: Adam loop, plateau schedule, evaluation, benchmarks

pub mod attention;
pub mod bytes;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metric;
pub mod model;
pub mod nn;
pub mod patch;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, ParamStore, Scalar, Tensor};

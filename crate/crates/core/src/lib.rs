//! Multi-stream self-attention encoder over dilated factorized convolutions.
//!
//! The crate provides a minimal reverse-mode autodiff tensor core, the
//! semi-orthogonal constraint machinery for factorized weights, the stream /
//! block / model assembly, a training loop with an exponential learning-rate
//! schedule, a synthetic multi-resolution frame-labeling task, and binary
//! containers for features and checkpoints.

pub mod checkpoint;
pub mod constraint;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{BlockConfig, Model, ModelConfig, StreamConfig};
pub use params::Parameter;
pub use tensor::{Mode, Padding, Tensor};

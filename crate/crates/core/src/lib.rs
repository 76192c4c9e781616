//! Primal-dual quantization-aware training.
//!
//! Trains a full-precision model subject to layerwise and output proximity
//! constraints against its fixed-point-quantized shadow, then uses the
//! resulting dual variables to rank layer sensitivity and drive
//! mixed-precision assignment.

pub mod checkpoint;
pub mod config;
pub mod constraints;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod quantize;
pub mod sensitivity;
pub mod shadow;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

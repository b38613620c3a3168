//! Shared-encoder multi-task network for joint lesion segmentation and
//! classification on ultrasound-style images.

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

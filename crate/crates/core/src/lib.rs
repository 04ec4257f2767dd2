//! Light-field salient object detection with a single shared-weight
//! encoder over the all-focus image and the focal stack, attention-based
//! information aggregation, MixLD blending augmentation, and the standard
//! saliency metrics.

pub mod config;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod ia;
pub mod losses;
pub mod metrics;
pub mod mixld;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

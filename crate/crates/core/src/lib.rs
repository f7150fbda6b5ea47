//! Federated LoRA fine-tuning of a dual-scale vision transformer with
//! knowledge distillation, class-balanced sampling and Grad-CAM++.

pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod fed;
pub mod gradcam;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

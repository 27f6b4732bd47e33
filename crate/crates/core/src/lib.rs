//! Dual-teacher knowledge distillation with confidence-driven dynamic weighting.

mod binio;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod profiler;
pub mod run;
pub mod tensor;
pub mod train;
pub mod trend;

pub use binio::fnv1a64;
pub use error::{Error, Result};

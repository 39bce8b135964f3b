//! Relative-update and alignment dynamics for width-scaled training.

pub mod analytic;
pub mod error;
pub mod experiment;
pub mod mat;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use mat::Mat;

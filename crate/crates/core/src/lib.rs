//! Anchor-guided end-to-end driving planner.

pub mod anchors;
pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod perception;
pub mod planner;
pub mod raster;
pub mod scenario;
pub mod sim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

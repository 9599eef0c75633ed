pub mod analytic;
pub mod checkpoint;
pub mod error;
pub mod metrics;
pub mod model;
pub mod point;
pub mod reward;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
pub use point::Point2;

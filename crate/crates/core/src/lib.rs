pub mod distill;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod radar_data;
pub mod trainer;

pub use error::{Error, Result};

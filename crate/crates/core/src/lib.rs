//! Edge-guided, class-balanced active learning for raster semantic
//! segmentation.

pub mod acquisition;
pub mod alrt;
pub mod dataset;
pub mod edge;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod pseudo;
pub mod raster;
pub mod rle;
pub mod synth;
pub mod units;

pub use error::{Error, Result};

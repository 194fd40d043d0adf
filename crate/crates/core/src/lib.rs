//! Building footprint tracking from low-resolution satellite time series,
//! with a reference-guided super-resolution front end.

pub mod dataset;
pub mod error;
pub mod footprint;
pub mod metrics;
pub mod nets;
pub mod objective;
pub mod patch;
pub mod pipeline;
pub mod raster;
pub mod sr;
pub mod tracker;

pub use error::{Error, Result};

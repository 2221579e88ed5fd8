pub mod dataset;
pub mod detect;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod parse;
pub mod plot;
pub mod predict;
pub mod raster;
pub mod refine;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x0}, {y0}, {x1}, {y1})")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("location ({x}, {y}) lies outside the box")]
    LocationOutsideBox { x: f64, y: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("scene {index} ({name}): {reason}")]
    Scene { index: usize, name: String, reason: String },

    #[error("non-finite loss term {term} = {value}")]
    NonFinite { term: &'static str, value: f64 },

    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;

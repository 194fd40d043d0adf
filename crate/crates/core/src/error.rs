use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("pixel out of range in band {band}: value {value} outside [{lo}, {hi}]")]
    OutOfRange { band: usize, value: f64, lo: f64, hi: f64 },
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("empty series: {0}")]
    EmptySeries(String),
    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: &'static str, step: usize },
    #[error("tile plan: {0}")]
    Tiling(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Nn(#[from] hrtrack_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension { op, detail: detail.into() }
}

pub(crate) fn file_err(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Error {
    Error::File { path: path.into(), message: message.to_string() }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch (expected {expected}, got {got})")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> NnError {
    NnError::Shape {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}

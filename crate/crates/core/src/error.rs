use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("empty brain mask")]
    EmptyBrainMask,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("expected {expected} patch masks, got {actual}")]
    CellCountMismatch { expected: usize, actual: usize },

    #[error("cell {cell} out of range for grid with {cells} cells")]
    CellOutOfRange { cell: usize, cells: usize },

    #[error("slice {0} is not tagged")]
    UnknownSlice(usize),

    #[error("tag file schema violation: {0}")]
    Schema(String),

    #[error("zero variance in training data")]
    ZeroVariance,

    #[error("undefined surface distance: {0}")]
    UndefinedSurfaceDistance(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            message: message.into(),
        }
    }
}

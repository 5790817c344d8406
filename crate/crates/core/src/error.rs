use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid scaling factor {0}: must be at least 2")]
    InvalidFactor(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask of size {requested} exceeds the configured maximum {max}")]
    SizeOverflow { requested: usize, max: usize },

    #[error("entry ({row}, {col}) = {value} lies inside the rounding guard band")]
    NumericalInstability { row: usize, col: usize, value: f64 },

    #[error("attention row {row} has total weight {sum:e}; the mask row is effectively zero")]
    DegenerateRow { row: usize, sum: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("grid pool is empty")]
    EmptyPool,

    #[error("parse error in {path}: {message} (line {line}, column {column})")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation failed for {location}: {message}")]
    Validation { location: String, message: String },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

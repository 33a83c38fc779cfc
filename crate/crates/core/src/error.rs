use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid dimensions for {op}: {reason}")]
    Dims { op: &'static str, reason: String },

    #[error("loss must be a scalar (1x1x1) grid, got {0}")]
    NonScalarLoss(String),

    #[error("value out of range in {op}: {reason}")]
    Range { op: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss = {loss}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        loss: f64,
    },

    #[error("{path}: malformed image: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("{path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: requires x1 < x2 and y1 < y2 with finite coordinates")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("image `{image_id}`: {reason}")]
    InvalidImage { image_id: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {reason}")]
    ConfigSyntax {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("image has no proposals")]
    NoProposals,

    #[error("no trainable image: {0}")]
    NoTrainableImage(String),

    #[error("empty dataset list")]
    EmptyDatasets,

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Whether the error stems from bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidBox { .. }
            | Error::InvalidImage { .. }
            | Error::InvalidDataset(_)
            | Error::InvalidConfig(_)
            | Error::ConfigSyntax { .. }
            | Error::UnknownImage(_)
            | Error::DimensionMismatch { .. }
            | Error::Parse { .. }
            | Error::Json(_) => true,
            Error::Iteration { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

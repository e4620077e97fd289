use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by grid construction, calibration, evaluation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("mask mismatch: {0}")]
    MaskMismatch(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("invalid level {0}: levels must lie strictly inside (0, 1)")]
    InvalidLevel(f64),

    #[error("invalid level scheme: {0}")]
    InvalidScheme(String),

    #[error("missing quantile level {0}")]
    MissingLevel(f64),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("invalid interval: lower bound {lower} exceeds upper bound {upper}")]
    InvalidInterval { lower: f64, upper: f64 },

    #[error("no test records")]
    NoRecords,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed grid file: {0}")]
    Format(String),

    #[error("missing artifacts: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingArtifacts(Vec<PathBuf>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

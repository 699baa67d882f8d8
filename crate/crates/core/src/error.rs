use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CmnError>;

#[derive(Debug, Error)]
pub enum CmnError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Cholesky failed even after the full jitter ladder.
    #[error("precision matrix is not positive definite (minimum diagonal entry {min_diag:e})")]
    SingularPrecision { min_diag: f64 },

    #[error("datapoint {index}: {source}")]
    AtDatapoint {
        index: usize,
        #[source]
        source: Box<CmnError>,
    },

    #[error("sweep {sweep}: {source}")]
    AtSweep {
        sweep: usize,
        #[source]
        source: Box<CmnError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("cannot stratify: {0}")]
    Stratification(String),

    #[error("invalid posterior file: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CmnError {
    pub fn domain(msg: impl Into<String>) -> Self {
        CmnError::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        CmnError::Shape(msg.into())
    }

    pub(crate) fn at_datapoint(self, index: usize) -> Self {
        CmnError::AtDatapoint {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_sweep(self, sweep: usize) -> Self {
        CmnError::AtSweep {
            sweep,
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CmnError::Io {
            path: path.into(),
            source,
        }
    }
}

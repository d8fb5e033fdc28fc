use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("query point lies in an unobserved region")]
    Unobserved,

    #[error("no supervision: every sample of the batch lies in unobserved space")]
    NoSupervision,

    #[error("insufficient overlap with the map: coverage {coverage:.3} below {required:.3}")]
    InsufficientOverlap { coverage: f64, required: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("sensor origin lies inside scene geometry (sdf {0:.4})")]
    SensorInsideGeometry(f64),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The feature has no slot in the 8-dimensional filter state.
    #[error("feature {0} is not part of the filter state")]
    NotInFilterState(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    /// Corner-offset and reference-point operations require a rectangle vertex.
    #[error("invalid reference point: {0}")]
    InvalidReferencePoint(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    /// Cholesky or innovation-covariance failure after the jitter ladder.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// Wire-format violation; `path` points at the offending field.
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("unknown sensor: {0}")]
    UnknownSensor(String),

    /// Message arrived for a cycle that has already been flushed.
    #[error("late message: cycle {cycle} already flushed (timestamp {timestamp})")]
    LateMessage { cycle: i64, timestamp: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

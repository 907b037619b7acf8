use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point ({lon}, {lat}) lies outside the grid bounding box")]
    OutOfGrid { lon: f64, lat: f64 },

    #[error("point {index}: {source}")]
    AtPoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("pair ({query}, {candidate}): {source}")]
    AtPair {
        query: usize,
        candidate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    Shape {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("cell index {index} out of range for {n_nodes} cells")]
    CellOutOfRange { index: usize, n_nodes: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_point(index: usize, source: Error) -> Self {
        Error::AtPoint {
            index,
            source: Box::new(source),
        }
    }

    /// True when the error stems from numerical breakdown (NaN/Inf) rather
    /// than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid volume metadata in {path}: {reason}")]
    Metadata { path: PathBuf, reason: String },
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("{axis} index {index} out of range (extent {extent})")]
    IndexOutOfRange {
        axis: &'static str,
        index: i64,
        extent: usize,
    },
    #[error("invalid range: lo {lo} must be below hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("cache does not belong to the current network state")]
    StaleCache,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model file: {0}")]
    Model(String),
    #[error("csv error in {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad user input or missing files rather than
    /// by a failure inside the pipeline itself.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Diverged { .. } | Error::StaleCache)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

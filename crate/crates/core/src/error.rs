use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum PepsError {
    /// Axis lengths or grid dimensions that do not agree.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Axis or element index out of range, or an invalid permutation.
    #[error("index error: {0}")]
    Index(String),

    /// Linear algebra or floating point breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A conditional distribution with no support during direct sampling.
    #[error("degenerate conditional distribution at site ({row}, {col})")]
    Degenerate { row: usize, col: usize },

    /// A data point with zero amplitude; its log-likelihood is infinite.
    #[error("infinite negative log-likelihood: data point {index} has zero amplitude")]
    InfiniteNll { index: usize },

    /// A data point with zero amplitude in the positive phase of the gradient.
    #[error("infinite gradient: data point {index} has zero amplitude")]
    InfiniteGradient { index: usize },

    /// No mixture mode assigns positive probability to a configuration.
    #[error("no mode assigns positive probability to the configuration")]
    NoSupport,

    /// Enumeration or storage request beyond the supported size.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Malformed binary or text file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Invalid user input such as a malformed cluster file.
    #[error("input error: {0}")]
    Input(String),

    /// A mixture mode with no examples.
    #[error("mode {0} contains no examples")]
    EmptyMode(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PepsError>;

impl PepsError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PepsError::Shape(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        PepsError::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PepsError::Io {
            path: path.into(),
            source,
        }
    }
}

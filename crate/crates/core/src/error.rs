use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gather contains non-finite values")]
    NonFinite,

    #[error("gather is {height}x{width}; both dimensions must be at least 2")]
    TooSmall { height: usize, width: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("I/O failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("payload of {} holds {actual} bytes, header implies {expected}", path.display())]
    HeaderMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported dtype {0:?} (only \"f32\" is supported)")]
    UnsupportedDtype(String),

    #[error("malformed header or manifest {}: {message}", path.display())]
    BadHeader { path: PathBuf, message: String },

    #[error("invalid specification: {0}")]
    BadSpec(String),

    #[error("input spectrum is identically zero")]
    DegenerateSpectrum,

    #[error("mask sampling produced only degenerate draws after {attempts} attempts")]
    RedrawExhausted { attempts: usize },

    #[error("weight matrix has a negative entry")]
    NegativeWeight,

    #[error("invalid architecture: {0}")]
    BadArchitecture(String),

    #[error("input {height}x{width} is not divisible by {factor}")]
    ShapeNotDivisible {
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("training diverged at iteration {iteration} (non-finite loss)")]
    DivergenceDetected { iteration: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::ShapeMismatch { expected, actual }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlabError>;

#[derive(Debug, Error)]
pub enum FlabError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric: entry ({row}, {col}) differs by {diff:e}")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rule supports networks with at most {max} layers, got {depth}")]
    UnsupportedDepth { depth: usize, max: usize },

    #[error("feedback matrix has zero spread; cannot renormalize")]
    DegenerateFeedback,

    #[error("network feedback is not factorized")]
    Unfactorized,

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("initial order parameters do not satisfy the early-training assumptions: {0}")]
    InitMismatch(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{path}: bad magic number {found} (expected {expected})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FlabError {
    pub(crate) fn dims(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        FlabError::DimensionMismatch { op, left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlabError::Io {
            path: path.into(),
            source,
        }
    }
}

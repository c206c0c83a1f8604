use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix contains a non-finite entry")]
    NonFinite,
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    Asymmetric(f64),
    #[error("matrix is not positive definite (pivot {pivot} = {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: String, got: String },
    #[error("invalid GGD shape parameter {0} (must be > 0)")]
    InvalidShape(f64),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("map is not strictly monotone on the sample range")]
    NonMonotoneMap,
    #[error("batch too small: need at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("embedding batch has not been normalized")]
    NotNormalized,
    #[error("rescale state used before initialization")]
    Uninitialized,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss in term `{term}`")]
    NonFiniteLoss { term: &'static str },
    #[error("non-finite parameter in `{0}` after update")]
    NonFiniteParameter(String),
    #[error("encoder has no momentum target")]
    NoTarget,
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

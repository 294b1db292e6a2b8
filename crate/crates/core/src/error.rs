use crate::covariance::CovarianceParams;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Numerical,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty variogram: no point pairs within {max_dist}")]
    EmptyVariogram { max_dist: f64 },

    #[error("variogram fit failed (best so far: {best:?})")]
    FitFailure { best: Option<CovarianceParams> },

    #[error("covariance matrix is not positive definite (condition estimate {condition:e})")]
    NotSpd { condition: f64 },

    #[error("all kernel weights underflow at row {row}")]
    DegenerateKernel { row: usize },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("leaf system is singular or indefinite (smallest pivot {pivot:e} at {index})")]
    Solve { pivot: f64, index: usize },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("unsupported model version {found} (expected {expected})")]
    UnsupportedVersion { found: u64, expected: u64 },

    #[error("relative error undefined: sum of |y| is zero but errors are nonzero")]
    UndefinedRelativeError,

    #[error("degenerate test: {0}")]
    Degenerate(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::FitFailure { .. }
            | Error::NotSpd { .. }
            | Error::DegenerateKernel { .. }
            | Error::RankDeficient(_)
            | Error::Solve { .. }
            | Error::UndefinedRelativeError
            | Error::Degenerate(_) => ErrorClass::Numerical,
            _ => ErrorClass::Usage,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

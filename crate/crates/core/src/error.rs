use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid value: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },

    #[error("non-finite estimating equation value at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("singular bread matrix in sandwich covariance")]
    SingularBread,

    #[error("no reviewed records: match probabilities cannot be estimated")]
    NoReviewedRecords,

    #[error("no reviewed records in cell {level} (y*={y_star}) and strict fallback policy")]
    EmptyCell { level: String, y_star: u8 },

    #[error("cell {level} (y*={y_star}) missing from match-probability table")]
    MissingCell { level: String, y_star: u8 },

    #[error("covariate level {level} missing from residual-moment table")]
    MissingLevel { level: String },

    #[error("degenerate optimal weight at covariate level {level}: denominator {denominator:e}")]
    DegenerateCell { level: String, denominator: f64 },

    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("ground truth required: {0}")]
    MissingGroundTruth(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidInput(_)
            | Error::Parse { .. }
            | Error::MissingGroundTruth(_)
            | Error::DimensionMismatch { .. }
            | Error::DataIntegrity(_) => 2,
            Error::SingularJacobian { .. }
            | Error::Divergence { .. }
            | Error::SingularBread
            | Error::NoReviewedRecords
            | Error::EmptyCell { .. }
            | Error::MissingCell { .. }
            | Error::MissingLevel { .. }
            | Error::DegenerateCell { .. } => 3,
            Error::Io { .. } | Error::Serialize(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

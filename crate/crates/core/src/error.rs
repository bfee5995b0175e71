use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate feature '{0}'")]
    DegenerateFeature(String),

    #[error("no features selected")]
    NoFeaturesSelected,

    #[error("unknown feature '{0}'")]
    UnknownFeature(String),

    #[error("matrix is not positive definite (leading minor {index} fails)")]
    NotPositiveDefinite { index: usize },

    #[error("rank-deficient covariance; use the graphical lasso instead")]
    RankDeficientCovariance,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("graphical lasso did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("empty cluster")]
    EmptyCluster,

    #[error("zero total variation")]
    ZeroTotalVariation,

    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// True for failures caused by the data itself (as opposed to bad
    /// arguments or I/O).
    pub fn is_statistical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateFeature(_)
                | Error::NotPositiveDefinite { .. }
                | Error::RankDeficientCovariance
                | Error::NoConvergence { .. }
                | Error::DegenerateClustering(_)
                | Error::EmptyCluster
                | Error::ZeroTotalVariation
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            Error::Io(e.to_string())
        } else {
            Error::Csv(e.to_string())
        }
    }
}

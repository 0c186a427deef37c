use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("knot {index} ({value}) is invalid: {reason}")]
    InvalidKnot {
        index: usize,
        value: f64,
        reason: String,
    },

    #[error("point {value} lies outside the basis domain [{lo}, {hi}] in dimension {dim}")]
    OutsideDomain {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("derivative order {deriv} exceeds spline degree {degree} in dimension {dim}{context}")]
    DerivativeTooHigh {
        dim: usize,
        deriv: usize,
        degree: usize,
        context: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error(
        "linear system is singular even after the ridge floor; \
         consider more knots or a larger adhesion parameter ({0})"
    )]
    SingularSystem(String),

    #[error("condition rows are linearly dependent; redundant rows: {rows:?}")]
    RedundantConditions { rows: Vec<usize> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("too many failed replicates: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularSystem(_)
                | Error::Numerical(_)
                | Error::Sampler(_)
                | Error::TooManyFailures { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Csv(_))
    }
}

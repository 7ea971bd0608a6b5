use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no complete samples: {0}")]
    EmptySamples(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("cholesky factorization failed even with jitter {max_jitter:e}")]
    FactorizationFailed { max_jitter: f64 },

    #[error("requested dimension {dim} retains a zero singular value; try a smaller dimension (spectrum {spectrum:?})")]
    RankDeficient { dim: usize, spectrum: Vec<f64> },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("filter normalizer {normalizer:e} is too close to zero")]
    FilterDivergence { normalizer: f64 },

    #[error("value recursion diverges: spectral radius of the discounted operator is {spectral_radius}")]
    DivergentValue { spectral_radius: f64 },

    #[error("observation symbol {0} has no learned operator")]
    UnknownObservation(String),

    #[error("covariance set lacks `{0}`")]
    MissingCovariance(&'static str),

    #[error("window has zero probability under the model")]
    ZeroProbability,

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn mismatch(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

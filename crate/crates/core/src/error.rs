use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite number appeared in an input or intermediate quantity.
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("unsupported Sobolev exponent s = {0}; only |s| <= 1 is supported")]
    UnsupportedExponent(f64),

    #[error("problem size {dof} exceeds the dense-solver cap {cap}")]
    SizeLimit { dof: usize, cap: usize },

    #[error(
        "covariance is not positive semidefinite: Cholesky failed with jitter {jitter:e} \
         (smallest eigenvalue ≈ {min_eigenvalue:e})"
    )]
    NotPositiveSemidefinite { jitter: f64, min_eigenvalue: f64 },

    #[error("insufficient data for a rate fit: {usable} usable rows, need {required} (flagged rows: {flagged:?})")]
    InsufficientData {
        usable: usize,
        required: usize,
        flagged: Vec<usize>,
    },

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("unknown builtin experiment `{0}`")]
    UnknownExperiment(String),

    #[error("sample {sample}, level {level}: {source}")]
    SampleFailure {
        sample: usize,
        level: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by the numbers themselves rather than by
    /// malformed input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::NotPositiveSemidefinite { .. } => true,
            Error::SampleFailure { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub(crate) fn check_finite(values: &[f64], context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_owned(),
            index,
        }),
        None => Ok(()),
    }
}

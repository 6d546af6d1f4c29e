use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point lies outside the domain (or interior) required by an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The closed-form step would leave double precision range.
    #[error("step overflow guard: exponent {exponent:.3e} at coordinate {coordinate} exceeds cap {cap}")]
    OverflowGuard { coordinate: usize, exponent: f64, cap: f64 },

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("at iteration {k}: {source}")]
    AtIteration {
        k: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn at(self, k: u64) -> Self {
        match self {
            e @ Error::AtIteration { .. } => e,
            e => Error::AtIteration { k, source: Box::new(e) },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The innermost error, skipping iteration context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures of the numerics (as opposed to configuration or IO).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::Domain(_) | Error::InvalidProblem(_) | Error::OverflowGuard { .. } | Error::NoConvergence(_)
        )
    }
}

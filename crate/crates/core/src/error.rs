use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid network: {0}")]
    Validation(String),

    #[error("branch {from}-{to} has zero impedance")]
    SingularBranch { from: usize, to: usize },

    #[error("measurement lookup failed: {0}")]
    Lookup(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "power flow did not converge after {iterations} iterations (max mismatch {mismatch:e})"
    )]
    PowerFlowDivergence { iterations: usize, mismatch: f64 },

    #[error("not observable: {0}")]
    Observability(String),

    #[error("estimator diverged: {0}")]
    Divergence(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::SingularBranch { .. }
            | Error::Lookup(_)
            | Error::Config(_)
            | Error::Dimension(_)
            | Error::Contract(_) => 2,
            Error::PowerFlowDivergence { .. }
            | Error::Observability(_)
            | Error::Divergence(_)
            | Error::Training(_) => 3,
            Error::Io { .. } => 4,
        }
    }
}

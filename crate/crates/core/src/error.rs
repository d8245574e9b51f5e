use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A sampler invariant failed mid-chain.
    #[error("invariant violated at iteration {iteration}: {invariant}")]
    Invariant { iteration: u64, invariant: String },

    #[error("stick-breaking exceeded the safety cap of {cap} components (smallest slice {u_min:e})")]
    StickBreakingCap { cap: usize, u_min: f64 },

    #[error("malformed draws file {}: {message}", path.display())]
    DrawsFormat { path: PathBuf, message: String },
}

impl Error {
    /// True for errors caused by user input rather than by the program.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::Config(_) | Error::Parse { .. } | Error::DrawsFormat { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

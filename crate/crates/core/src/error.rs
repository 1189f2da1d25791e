//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A randomized constructor exhausted its retry budget.
    #[error("construction failed: {0}")]
    ConstructionFailure(String),

    /// A training run hit a non-finite parameter and was aborted.
    #[error("run aborted at round {round}, worker {worker}: {reason}")]
    RunAbort {
        round: usize,
        worker: usize,
        reason: String,
    },

    /// Filesystem failure, with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file that parsed partway and then stopped making sense.
    #[error("malformed file {path} at line {line}: {msg}")]
    MalformedFile {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

use std::io;
use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad input data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<Error> for DiffError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diff(d) => d,
            other => DiffError::InvalidArgument {
                op: "genret",
                msg: other.to_string(),
            },
        }
    }
}

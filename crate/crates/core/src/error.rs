use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input supplied by the caller.
    #[error("invalid input: {0}")]
    Input(String),

    /// Two records gave different labels for the same annotator/item cell.
    #[error(
        "conflicting labels for annotator `{annotator_id}` on item `{item_id}`: `{first}` vs `{second}`"
    )]
    Conflict {
        annotator_id: String,
        item_id: String,
        first: String,
        second: String,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("provider `{provider}`: {message}")]
    Provider { provider: String, message: String },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

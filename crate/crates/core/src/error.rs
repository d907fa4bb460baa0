use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read image {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("out of sequence: {0}")]
    Sequencing(String),

    #[error("non-finite {what} at scale {scale}, iteration {iteration}")]
    NonFinite {
        scale: usize,
        iteration: usize,
        what: &'static str,
    },

    #[error("malformed {name}: {reason}")]
    Format { name: String, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

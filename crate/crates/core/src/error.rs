use std::path::PathBuf;

/// Errors produced by tensor ops, model assembly, training and IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid model/train/run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite values or a numerically impossible request.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Filesystem-level failure.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents; `offset` is the byte position of the problem.
    #[error("{}: invalid data at byte {offset}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    /// Checkpoint-specific failure (bad checksum, missing names, version).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Dataset-level failure (missing directories, empty sets, unpaired files).
    #[error("data: {0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

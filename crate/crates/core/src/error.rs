use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An input for which the requested quantity is undefined (e.g. the cosine
    /// of a zero vector).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("composed key is degenerate (norm {norm:.3e})")]
    DegenerateKey { norm: f64 },

    #[error("singular key system: {0}")]
    SingularKey(String),

    /// Post-orthogonalisation removed the whole update.
    #[error("edit {edit_index} absorbed by the protected subspaces")]
    EditAbsorbed { edit_index: usize },

    #[error("decomposition failed to converge: {0}")]
    NoConvergence(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed record file at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

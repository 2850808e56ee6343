use std::path::PathBuf;

use crate::model::ModelGraph;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("relative error is undefined for a zero-norm reference")]
    UndefinedRatio,

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("nothing to do: {0}")]
    NothingToDo(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed model manifest: {0}")]
    MalformedManifest(String),

    #[error("checksum mismatch for {blob}: expected {expected}, found {found}")]
    ChecksumMismatch {
        blob: String,
        expected: String,
        found: String,
    },

    /// Carries the last model whose loss was still finite.
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    TrainingDiverged {
        epoch: usize,
        last_finite: Box<ModelGraph>,
    },
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

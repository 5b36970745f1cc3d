use std::io;
use std::path::PathBuf;

/// Error type shared by every module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A vector with zero Euclidean norm where a direction is required.
    #[error("degenerate embedding (zero vector){}", .context.as_deref().map(|c| format!(": {c}")).unwrap_or_default())]
    DegenerateEmbedding { context: Option<String> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown utterance id `{0}`")]
    UnknownUtterance(String),

    #[error("duplicate utterance id `{0}`")]
    DuplicateUtterance(String),

    /// Invalid argument or input data outside any file context.
    #[error("{0}")]
    Invalid(String),

    /// Malformed content in an input file.
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn degenerate() -> Self {
        Error::DegenerateEmbedding { context: None }
    }

    pub(crate) fn degenerate_ctx(context: impl Into<String>) -> Self {
        Error::DegenerateEmbedding {
            context: Some(context.into()),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures of the underlying I/O layer (as opposed to
    /// validation or malformed-content errors).
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

/// Unified error type for the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array shape contract violation, naming the offending axis.
    #[error("shape mismatch on {axis}: {left} vs {right} ({context})")]
    ShapeMismatch {
        axis: String,
        left: usize,
        right: usize,
        context: String,
    },

    /// A caller-supplied value is outside its documented domain.
    #[error("{0}")]
    InvalidArgument(String),

    /// File contents violate the expected format.
    #[error("{0}")]
    InvalidData(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(axis: &str, left: usize, right: usize, context: &str) -> Self {
        Error::ShapeMismatch {
            axis: axis.to_string(),
            left,
            right,
            context: context.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

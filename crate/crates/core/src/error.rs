use std::path::PathBuf;

/// Errors produced anywhere in the dehazing toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: String,
        got: String,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("hazy frame {t}: {source}")]
    AtFrame {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteLoss(_) => true,
            Error::AtFrame { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

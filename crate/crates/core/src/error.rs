use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("gradient: {0}")]
    Grad(String),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error(transparent)]
    Weights(#[from] WeightsError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding a weights image.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WeightsError {
    #[error("bad magic bytes (expected \"MTWT\")")]
    BadMagic,
    #[error("unsupported weights version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload while reading {what}")]
    Truncated { what: &'static str },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("invalid tensor name: {0}")]
    InvalidName(String),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("tensor `{0}` has a zero extent")]
    ZeroExtent(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
}

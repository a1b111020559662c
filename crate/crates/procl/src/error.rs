use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or graph shapes do not line up.
    #[error("shape mismatch at {context}: {detail}")]
    Shape { context: String, detail: String },

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Dimensions of model, data, or control vectors disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid argument outside of shape/dimension problems.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// File does not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: PathBuf, expected: &'static str },

    /// File declares an unsupported format version.
    #[error("unsupported version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    /// File ended early or its header counts disagree with its contents.
    #[error("truncated or inconsistent file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    /// Configuration file could not be parsed or contains bad values.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

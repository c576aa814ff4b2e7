use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    DataFormat,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {location}: {detail}")]
    Shape { location: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-binary sensitive label {value} at sample {index}")]
    NonBinaryLabel { index: usize, value: u64 },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("empty dataset")]
    Empty,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { location: location.into(), detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Stable machine-readable identifier for the error variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NonBinaryLabel { .. } => "non_binary_label",
            Error::Header(_) => "bad_header",
            Error::Csv { .. } => "csv",
            Error::Empty => "empty",
            Error::Io(_) => "io",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Shape { .. } => ErrorClass::Usage,
            Error::NonFinite(_) => ErrorClass::Numeric,
            Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::DataFormat,
        }
    }
}

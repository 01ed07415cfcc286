use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed container: {0}")]
    Format(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("precision {p} outside [{low}, {high}]")]
    PrecisionOutOfRange { p: usize, low: usize, high: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Coarse error classes, used by the CLI and the C ABI to pick exit/status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Caller passed something unusable (bad flags, shapes, ranges).
    Usage,
    /// Reading or writing a file failed, or its contents are corrupt.
    Io,
    /// Input data cannot be processed numerically.
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::UnsupportedDtype(_)
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Format(_) => ErrorClass::Io,
            Error::NonFinite(_) => ErrorClass::Numeric,
            Error::Shape(_) | Error::PrecisionOutOfRange { .. } | Error::InvalidArgument(_) => ErrorClass::Usage,
        }
    }
}

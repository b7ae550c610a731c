use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Violations detected while decoding an UPCK-v1 file. The message names
/// the first violated field.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("nonzero padding")]
    NonZeroPadding,
    #[error("header truncated")]
    HeaderTruncated,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown kind {0:?}")]
    UnknownKind(String),
    #[error("invalid tensor name {0:?}")]
    InvalidName(String),
    #[error("invalid shape for {0:?}")]
    InvalidShape(String),
    #[error("unsupported dtype {dtype:?} for {name:?} (only f32)")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("extent mismatch for {0:?}")]
    ExtentMismatch(String),
    #[error("overlapping offsets at {0:?}")]
    OverlappingOffsets(String),
    #[error("gap in payload before {0:?}")]
    PayloadGap(String),
    #[error("payload truncated")]
    PayloadTruncated,
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("non-finite value in {0:?}")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("incompatible parameters ({reason}): {names:?}")]
    Incompatible { reason: String, names: Vec<String> },
    #[error("argument error: {0}")]
    Argument(String),
    #[error("expert {index} has a zero delta on {layer:?}; fall back to a seeded random unit router row")]
    DegenerateExpert { index: usize, layer: String },
    #[error("evaluation failed for {context}: {message}")]
    Callback { context: String, message: String },
}

impl Error {
    pub fn incompatible(reason: impl Into<String>, names: Vec<String>) -> Self {
        Error::Incompatible {
            reason: reason.into(),
            names,
        }
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

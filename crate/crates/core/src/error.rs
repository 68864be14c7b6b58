use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Library-wide error type. File-format problems get their own variants so
/// callers can distinguish a wrong file from a damaged one.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },

    #[error("backward requires a scalar loss, got {len} elements")]
    NonScalarLoss { len: usize },

    #[error("non-finite gradient for parameter '{param}'; optimizer step aborted")]
    NanGradient { param: String },

    #[error("degenerate bounds: {0}")]
    DegenerateBounds(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated file while reading {0}")]
    Truncated(&'static str),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Checkpoint,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("non-finite value produced by {op} at element {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("numeric domain violation in {op}: {value}")]
    Domain { op: &'static str, value: f64 },

    #[error("backward has already been run on this graph")]
    BackwardTwice,

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("batch of size {0} cannot form negative pairs (need at least 2)")]
    DegenerateBatch(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("checkpoint was written for config digest {found}, expected {expected}")]
    CheckpointMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Json { .. } => {
                ErrorKind::Data
            }
            Error::CheckpointMismatch { .. } => ErrorKind::Checkpoint,
            _ => ErrorKind::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }
}

/// Failures decoding one of the binary containers (`MMEB` records and
/// `MMCK` checkpoints). Every variant has a stable [`FormatError::code`].
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported flags {0:#06x}")]
    UnsupportedFlags(u16),

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("{what} is {found}, manifest says {expected}")]
    DimMismatch {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("malformed field {field}: {detail}")]
    Malformed { field: &'static str, detail: String },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::UnsupportedVersion(_) => "version-mismatch",
            FormatError::UnsupportedFlags(_) => "bad-flags",
            FormatError::Truncated(_) => "truncated",
            FormatError::DimMismatch { .. } => "dim-mismatch",
            FormatError::Malformed { .. } => "malformed",
            FormatError::TrailingBytes(_) => "trailing-bytes",
        }
    }
}

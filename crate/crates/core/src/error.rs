//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // configuration
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // data and persistence
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("parse error: {0}")]
    Parse(String),

    // numerics
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("{op} requires positive input, found {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("total correspondence weight {0:e} is too small")]
    ZeroWeight(f64),
    #[error("need at least 3 correspondences, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate geometry: only {0} singular values above threshold")]
    DegenerateRank(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("overlap constraint unsatisfiable after {0} attempts")]
    OverlapUnsatisfiable(usize),

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

/// Error classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    DataIo,
    Numeric,
    Internal,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::DataIo => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Internal => 5,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorClass::Config,
            Error::Io { .. }
            | Error::MissingFile(_)
            | Error::CorruptFile { .. }
            | Error::ChecksumMismatch { .. }
            | Error::VersionMismatch { .. }
            | Error::Parse(_) => ErrorClass::DataIo,
            Error::Shape { .. }
            | Error::NonFinite(_)
            | Error::Domain { .. }
            | Error::ZeroWeight(_)
            | Error::TooFewPairs(_)
            | Error::DegenerateRank(_)
            | Error::Empty(_)
            | Error::OverlapUnsatisfiable(_) => ErrorClass::Numeric,
            Error::Invariant(_) => ErrorClass::Internal,
        }
    }
}

use std::path::PathBuf;

/// Crate-wide error type. [`Error::kind`] buckets variants for process exit
/// codes in the command-line frontend.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("shape rule violated at node {node} ({op}): {msg}")]
    ShapeRule { node: usize, op: String, msg: String },

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("unknown graph input '{0}'")]
    UnknownInput(String),

    #[error("config error at {path}:{line}: {msg}")]
    Config { path: String, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("bad raster file {path}: {msg}")]
    RasterFormat { path: PathBuf, msg: String },

    #[error("bad checkpoint file {path}: {msg}")]
    CheckpointFormat { path: PathBuf, msg: String },

    #[error("architecture hash mismatch: checkpoint {found:#010x}, expected {expected:#010x}")]
    ArchHashMismatch { found: u32, expected: u32 },

    #[error("parameter '{name}' mismatch: {msg}")]
    ParamMismatch { name: String, msg: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class, used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    GradCheck,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::InvalidConfig(_) => ErrorKind::Config,
            Error::Data(_)
            | Error::RasterFormat { .. }
            | Error::CheckpointFormat { .. }
            | Error::ArchHashMismatch { .. }
            | Error::ParamMismatch { .. }
            | Error::Io { .. } => ErrorKind::Data,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::GradCheck(_) => ErrorKind::GradCheck,
            _ => ErrorKind::Internal,
        }
    }
}

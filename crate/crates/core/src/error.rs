use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown domain {0}")]
    UnknownDomain(u32),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checksum mismatch: expected {expected:016x}, found {found:016x}")]
    Checksum { expected: u64, found: u64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("refusing to overwrite existing {0} (pass --force)")]
    WouldOverwrite(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("unsupported dump format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated: {id}, expected {expected}, got {actual}")]
    Truncated {
        id: String,
        expected: u64,
        actual: u64,
    },

    #[error("checksum mismatch in {id}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        id: String,
        stored: u32,
        computed: u32,
    },

    #[error("corrupt sample file for {id}: {message}")]
    Corrupt { id: String, message: String },

    #[error("invalid record {id}: {violations}")]
    InvalidRecord { id: String, violations: String },

    #[error("record {id} is inconsistent with the manifest: {message}")]
    Inconsistent { id: String, message: String },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("token {0} is not in the record's probability domain")]
    MissingToken(u32),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("AUC undefined: labels contain only one class")]
    UndefinedAuc,

    #[error("recall undefined: no positive labels")]
    NoPositives,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed score table: {0}")]
    ScoreTable(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of the checkpoint reader.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: expected NFCK, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Dataset validation diagnostics. Every variant names the offending entry
/// (or `<manifest>` for document-level problems) and the field involved.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("entry {entry}: missing required field `{field}`")]
    MissingField { entry: String, field: String },
    #[error("entry {entry}: subject {subject:?} is not a substring of the statement")]
    SubjectNotSubstring { entry: String, subject: String },
    #[error("entry {entry}: duplicate id")]
    DuplicateId { entry: String },
    #[error("entry {entry}: field `{field}`: {reason}")]
    Invalid { entry: String, field: String, reason: String },
    #[error("unsupported schema_version {0}")]
    SchemaVersion(u32),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training diverged at step {step}: loss {loss} > 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("edit state: {0}")]
    EditState(&'static str),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::EditState(_) => 2,
            Error::Numeric(_)
            | Error::Diverged { .. }
            | Error::Shape { .. }
            | Error::NonScalarLoss(_) => 4,
            Error::Input(_)
            | Error::Checkpoint(_)
            | Error::Dataset(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 3,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("record {id}: block {block} has length {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        block: String,
        expected: usize,
        found: usize,
    },

    #[error("record {id}: non-finite value in block {block}")]
    NonFinite { id: String, block: String },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("record {id}: invalid {field} value {value} (must be 0 or 1)")]
    InvalidLabel { id: String, field: &'static str, value: u8 },

    #[error("record {id}: hard flag {hard} inconsistent with label {label} and lmm prediction {lmm_prediction}")]
    HardFlagMismatch {
        id: String,
        hard: bool,
        label: u8,
        lmm_prediction: u8,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt payload {}: {reason}", path.display())]
    CorruptPayload { path: PathBuf, reason: String },

    #[error("split {split}: manifest declares {manifest} records, payload holds {payload}")]
    CountMismatch {
        split: String,
        manifest: usize,
        payload: usize,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("raw text audit file: {0}")]
    RawTexts(String),

    #[error("cannot pool an empty set of vectors")]
    EmptyPool,

    #[error("ragged input: vector {index} has length {found}, expected {expected}")]
    Ragged {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

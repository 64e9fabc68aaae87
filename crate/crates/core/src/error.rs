use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassMismatch { expected: usize, found: usize },

    #[error("label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },

    #[error("{}: bad magic bytes", path.display())]
    BadMagic { path: PathBuf },

    #[error("{}: unsupported version {found} (expected {expected})", path.display())]
    VersionMismatch { path: PathBuf, expected: u32, found: u32 },

    #[error("{}: truncated file ({detail})", path.display())]
    Truncated { path: PathBuf, detail: String },

    #[error("{}: unknown dtype tag {tag}", path.display())]
    UnknownDtype { path: PathBuf, tag: u8 },

    #[error("sample {id}: dimension mismatch: {detail}")]
    DimensionMismatch { id: String, detail: String },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("all thresholds equal 1; sampling distribution undefined")]
    DegenerateThresholds,

    #[error("non-finite gradient in parameter tensor `{0}`")]
    NonFiniteGradient(&'static str),

    #[error("source dataset has unlabeled sample {0}")]
    UnlabeledSource(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

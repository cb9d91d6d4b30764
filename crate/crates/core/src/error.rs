use std::path::PathBuf;

use thiserror::Error;

/// One problem found while validating an experiment config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    /// Dotted key path, e.g. `train.method`.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error:\n{}", format_fields(.0))]
    Config(Vec<FieldError>),

    #[error("IDX {path}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("IDX {path}: truncated payload (header declares {declared} bytes, file holds {actual})")]
    Truncated {
        path: PathBuf,
        declared: usize,
        actual: usize,
    },

    #[error("IDX {path}: dimension/payload mismatch ({detail})")]
    DimMismatch { path: PathBuf, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("{0}")]
    Report(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_fields(fields: &[FieldError]) -> String {
    fields.iter().map(|f| format!("  {f}")).collect::<Vec<_>>().join("\n")
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::BadMagic { .. } | Error::Truncated { .. } | Error::DimMismatch { .. } | Error::Data(_) => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

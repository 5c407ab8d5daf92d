use std::path::PathBuf;

use thiserror::Error;
use unixkd_core::CoreError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error in {path}: {kind}")]
    Data { path: PathBuf, kind: DataErrorKind },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("acceptance failure: {0}")]
    Acceptance(String),
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Distinct dataset diagnostics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataErrorKind {
    #[error("invalid meta.json: {0}")]
    Meta(String),
    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("size mismatch: meta implies {expected} bytes, file has {found}")]
    SizeMismatch { expected: u64, found: u64 },
    #[error("label {label} at sample {index} is not below num_classes = {classes}")]
    LabelOutOfRange { index: usize, label: u32, classes: usize },
    #[error("pixel value {value} at offset {offset} outside [0, 1]")]
    PixelRange { offset: usize, value: f32 },
    #[error("digest mismatch: meta says {expected}, content hashes to {found}")]
    Digest { expected: String, found: String },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, kind: DataErrorKind) -> Self {
        Self::Data {
            path: path.into(),
            kind,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Data { .. } => 2,
            Self::Numerical(_) => 3,
            Self::Core(CoreError::NonFinite(_)) => 3,
            Self::Acceptance(_) => 4,
            Self::Core(_) | Self::Analysis(_) | Self::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

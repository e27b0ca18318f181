use std::path::PathBuf;

use fsgan_autodiff::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("class {class} is not covered by any bundle (covered: {covered:?})")]
    ClassNotCovered { class: u16, covered: Vec<u16> },
    #[error("non-finite {what} at step {step}{}", dump.as_ref().map(|p| format!(", state dumped to {}", p.display())).unwrap_or_default())]
    NonFinite {
        what: String,
        step: u64,
        dump: Option<PathBuf>,
    },
    #[error("unknown case study `{0}` (expected cwru or paderborn)")]
    UnknownCase(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Stable upper-case error class for machine consumption.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Io(_)) | Error::Io { .. } => "IO_ERROR",
            Error::Tensor(TensorError::Checkpoint(_)) | Error::Format { .. } => "MALFORMED_INPUT",
            Error::Tensor(_) => "STAGE_FAILED",
            Error::Spec(_) | Error::Config(_) | Error::UnknownCase(_) => "CONFIG_INVALID",
            Error::Input(_) => "INVALID_INPUT",
            Error::MissingData(_) => "MISSING_INPUT",
            Error::ClassNotCovered { .. } => "CLASS_NOT_COVERED",
            Error::NonFinite { .. } => "NON_FINITE_LOSS",
        }
    }
}

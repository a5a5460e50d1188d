use std::path::PathBuf;

/// Errors raised by the attack pipeline.
///
/// Every variant maps onto a short machine-readable [`Error::kind`] tag, which
/// the command-line front end prints as a single-line prefix.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("no usable images found under {0}")]
    EmptyDataset(PathBuf),

    #[error("duplicate sample path {0}")]
    DuplicatePath(PathBuf),

    #[error("checkpoint {path}: corrupt section '{section}': {reason}")]
    CorruptCheckpoint {
        path: PathBuf,
        section: String,
        reason: String,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("attack budget violated: {0}")]
    BudgetViolation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Dataset(_) => "dataset",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::DuplicatePath(_) => "duplicate-path",
            Error::CorruptCheckpoint { .. } => "corrupt-checkpoint",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::BudgetViolation(_) => "budget-violation",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "serialization",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

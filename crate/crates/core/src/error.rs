use std::path::PathBuf;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("integration diverged at step {step}")]
    Diverged { step: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("zero variance in observed dimension {dim}")]
    ZeroVariance { dim: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
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

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag, used in the CLI's JSON error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::Diverged { .. } => "diverged",
            Error::InvalidInput(_) => "invalid_input",
            Error::ZeroVariance { .. } => "zero_variance",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

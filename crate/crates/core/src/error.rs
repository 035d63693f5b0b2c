use std::path::PathBuf;

use elp_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, ElpError>;

#[derive(Debug, Error)]
pub enum ElpError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{what}: expected width {expected}, got {found}")]
    WidthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what}: needs at least {min} frames, got {found}")]
    TooShort {
        what: &'static str,
        min: usize,
        found: usize,
    },

    #[error("emotion vector is not one-hot: {0:?}")]
    NotOneHot(Vec<f64>),

    #[error("codeword {code} outside 1..={max}")]
    CodeOutOfRange { code: usize, max: usize },

    #[error("degenerate eye corners at frame {frame}")]
    DegenerateEye { frame: usize },

    #[error("non-finite loss term {0}")]
    NonFiniteLoss(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{}:{line}: {msg}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ElpError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

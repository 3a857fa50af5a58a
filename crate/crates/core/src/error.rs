use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Shapes attached to a shape-mismatch error, printed as `[2, 3] vs [4]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shapes(pub Vec<Vec<usize>>);

impl fmt::Display for Shapes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| format!("{s:?}")).collect();
        f.write_str(&parts.join(" vs "))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes}")]
    ShapeMismatch { op: &'static str, shapes: Shapes },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this tape; call zero_grads() first")]
    BackwardTwice,

    #[error("function is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("AUC is undefined when only one class is present")]
    UndefinedAuc,

    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shapes(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::ShapeMismatch {
            op,
            shapes: Shapes(shapes.iter().map(|s| s.to_vec()).collect()),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn corrupt(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::BackwardTwice => "backward_twice",
            Error::NonDeterministic => "non_deterministic",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Corrupt { .. } => "corrupt_file",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::UndefinedAuc => "undefined_auc",
            Error::ArchitectureMismatch { .. } => "architecture_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::Leakage(_) => "leakage",
            Error::Io(_) => "io",
        }
    }
}

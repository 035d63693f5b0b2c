use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("shape {shape:?} holds {expected} values but {found} were supplied")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("{op}: input {value} is outside the domain")]
    Domain { op: &'static str, value: f64 },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: expected {expected} inputs, got {found}")]
    Arity {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("variable was not recorded on this tape")]
    ForeignVar,
}

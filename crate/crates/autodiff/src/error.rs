use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("gather: index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("function is not deterministic: {first} then {second} at identical inputs")]
    NonDeterministic { first: f64, second: f64 },
    /// An objective passed to a gradient check failed for a reason of its own.
    #[error("objective failed: {0}")]
    Objective(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

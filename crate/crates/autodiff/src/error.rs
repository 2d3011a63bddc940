use thiserror::Error;

/// Errors raised while recording or differentiating a graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid axis {axis} for rank-{rank} tensor in {op}")]
    Axis { op: &'static str, axis: usize, rank: usize },

    #[error("window size {window} does not divide spatial extent {height}x{width}")]
    Window { window: usize, height: usize, width: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

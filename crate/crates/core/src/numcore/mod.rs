//! Dense tensors, a handful of kernels, and exact reverse-mode gradients.

mod graph;
mod ops;
mod tape;
mod tensor;

pub use graph::{Eager, Graph};
pub use ops::{layer_norm, matmul, softmax};
pub use tape::{global_norm, AttentionGroup, AttentionLayout, Tape, Var, MASKED_LOGIT};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

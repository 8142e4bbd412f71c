//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything the encoder and the objectives need, nothing more: 2-D
//! matmul, elementwise arithmetic, row-broadcast bias, row-wise softmax and
//! layer norm, GELU, dropout, and a handful of reductions.

mod check;
mod graph;
mod tensor;

pub use check::max_gradient_error;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Logit added to blocked attention entries.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: range {start}..{end} exceeds {limit}")]
    Range {
        op: &'static str,
        start: usize,
        end: usize,
        limit: usize,
    },
    #[error("{op}: unsupported axis {axis}")]
    Axis { op: &'static str, axis: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },
    #[error("backward needs a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

#[cfg(test)]
mod tests;

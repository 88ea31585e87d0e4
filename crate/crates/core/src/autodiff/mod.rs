//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The operator set is closed: `conv2d`, `relu`, `add`, `global_avg_pool`,
//! `linear`, `l2_normalize`, plus the `sum` and `dot` reductions used to
//! turn tensor outputs into a scalar. Every shape rule is explicit; there is
//! no broadcasting.

mod gradcheck;
mod graph;
mod ops;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_difference_check, finite_difference_check_coords, GradCheckReport};
pub use graph::{Gradients, Graph, LeafKind, NodeId};
pub use ops::L2_EPS;
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("graph has not been evaluated; call forward() first")]
    GraphNotEvaluated,
    #[error("no loss output designated")]
    NoLoss,
    #[error("loss must be a single element, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("node {0} produced a non-finite value")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;

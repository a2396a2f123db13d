//! Reverse-mode automatic differentiation: tensors, the computation
//! graph, Adam, and finite-difference verification.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckRow};
pub use graph::{Binding, Graph, Var};
pub use optim::AdamState;
pub use tensor::{xavier_init, ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-d operand, got shape {shape:?}")]
    NotTwoDim { op: &'static str, shape: Vec<usize> },
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("softmax row {row} has every position masked")]
    AllMaskedRow { row: usize },
    #[error("embedding id {id} out of range for table with {rows} rows")]
    EmbedIndex { id: usize, rows: usize },
    #[error("gradient for parameter `{name}` is not finite")]
    NonFiniteGrad { name: String },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

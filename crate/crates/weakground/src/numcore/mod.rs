//! Minimal dense numeric core: f64 tensors, deterministic forward kernels,
//! and exact reverse-mode gradients for every operation the model and losses
//! use.
//!
//! Design points:
//! * 64-bit floats throughout — desk-scale sizes make memory irrelevant and
//!   gradient checks need the precision.
//! * Max-style reductions propagate gradient only to the argmax element; ties
//!   break toward the lowest index so backward is deterministic.
//! * The tape ([`Graph`]) records one forward pass and is dropped afterwards;
//!   there is no persistent graph between steps.

mod check;
mod graph;
mod ops;
mod tensor;

pub use check::{compare_gradients, fd_gradients, grad_check, GradCheckReport, GradMismatch};
pub use graph::{Graph, NodeId};
pub(crate) use graph::argmax;
pub use ops::{
    cosine_sim, cross_entropy, info_nce, linear_forward, logsumexp, mlp_forward, softmax,
    Activation, MlpLayer,
};
pub use tensor::{ParamStore, Tensor};

/// Normalization guard for cosine similarity denominators.
pub const COSINE_EPS: f64 = 1e-12;

/// Errors raised by numeric-core contract violations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch: left {left:?} vs right {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("index {index} out of range {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}

pub type NumResult<T> = Result<T, NumError>;

impl NumError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        NumError::Contract {
            op,
            msg: msg.into(),
        }
    }
}

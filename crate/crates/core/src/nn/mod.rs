//! Differentiable operators, parameters, optimizer and checkpoint container.

pub mod container;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, CoordSampling, GradCheckReport};
pub use graph::{AttentionLayout, Gradients, Graph, Var};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Tensor, MAX_RANK};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("trainable parameter `{0}` has no gradient buffer")]
    MissingGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Dense tensors, a reverse-mode tape with differentiable gradients, Adam
//! and L-BFGS-B.

mod adam;
pub mod conv;
mod lbfgsb;
mod second_order;
mod tape;
mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use lbfgsb::{lbfgsb_minimize, BoundBox, LbfgsbConfig, LbfgsbResult, LbfgsbStatus};
pub use second_order::gradient_node;
pub use tape::{backward, Gradients, NodeId, Tape, LEAKY_SLOPE, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {0} is not on the tape")]
    UnknownNode(usize),
    #[error("op `{0}` has no second-order adjoint")]
    NoSecondOrderAdjoint(&'static str),
    #[error("starting point lies outside the bounds")]
    Infeasible,
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

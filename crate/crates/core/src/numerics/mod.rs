//! Minimal differentiable tensor core.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod ops;
pub mod param;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeometry;
pub use param::{Init, ParamGrads, ParamId, ParamKind, ParamStore, Parameter, Session};
pub use tensor::{DType, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: zero-norm vector")]
    ZeroNorm { op: &'static str },
    #[error("{op}: normalization axis has {len} element(s), need at least 2")]
    DegenerateAxis { op: &'static str, len: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

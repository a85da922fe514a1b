//! Minimal dense-tensor engine with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod scalar;

pub use gradcheck::{grad_check, GradCheckParam, GradCheckReport};
pub use graph::{concat_cols, concat_rows, kl_div, Graph, NodeId, Tensor, NORM_EPS};
pub use scalar::Scalar;

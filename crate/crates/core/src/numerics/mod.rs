//! Dense tensors, static compute graphs and reverse-mode gradients.

mod exec;
mod fastmath;
mod gemm;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use exec::{backward, forward, forward_lean, Execution, Gradients, Layered, TensorSource};
pub use gemm::{gemm_nn, gemm_nt, gemm_tn};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, MAX_CHECKED_SCALARS};
pub use graph::{ComputeGraph, Node, NodeId, NodeKind};
pub use ops::{CustomOp, OpKind};
pub use tensor::{Scalar, Tensor};

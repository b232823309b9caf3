//! Dense tensors, the operation tape, and finite-difference checking.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_FD_STEP};
pub use graph::{ActivationKind, Gradients, Graph, MaskMode, NormKind, SeqLayout, Var};
pub use kernels::{gemm, View, ViewMut};
pub use tensor::Tensor;

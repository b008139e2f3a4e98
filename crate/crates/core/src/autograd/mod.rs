//! Dense tensors with reverse-mode differentiation.

mod graph;
mod tensor;

pub use graph::{gradcheck, gradcheck_many, Graph, Var};
pub use tensor::Tensor;

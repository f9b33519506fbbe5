//! Dense `f64` tensors, a reverse-mode compute graph, and a
//! finite-difference gradient oracle.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use graph::{Bindings, Chain, Gradients, Graph, NodeId};
#[cfg(test)]
pub(crate) use graph::sigmoid;
pub use tensor::Tensor;

/// Divides every row of a rank-2 tensor by its L2 norm.
pub fn row_normalize(m: &Tensor) -> crate::Result<Tensor> {
    m.shape2()?;
    m.row_normalized()
}

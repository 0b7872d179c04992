//! Dense tensors, reverse-mode differentiation, gradient checking and Adam.

mod adam;
mod array;
mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use adam::{AdamConfig, AdamState};
pub use array::Tensor;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, LeafCheck};
pub use graph::{Gradients, Graph, Precision, Var};
pub use kernels::{bottom_k_indices, top_k_indices};

#[cfg(test)]
mod tests;

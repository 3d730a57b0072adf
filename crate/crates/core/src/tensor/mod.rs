//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod value;

pub use gradcheck::{grad_check, GradCheckReport, LeafCheck, FD_EPSILON, SCALE_FLOOR};
pub use graph::{Gradients, Graph, Var, DISTANCE_FLOOR};
pub use value::Tensor;

#[cfg(test)]
mod tests;

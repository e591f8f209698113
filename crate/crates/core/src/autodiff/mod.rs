//! Dense `f64` tensors with tape-based reverse-mode differentiation and a
//! central-difference gradient oracle.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`crate::params::ParamStore`] and enter the graph as leaves; after
//! [`Graph::backward_into`] their gradients sit in the store until
//! [`crate::params::ParamStore::zero_grad`] is called.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{
    finite_diff_check, relative_error, FiniteDiff, GradFailure, GradReport, ParamGradSummary,
    DEFAULT_STEP, DEFAULT_TOL, DENOM_FLOOR,
};
pub use graph::{gelu, sigmoid, GradHook, Gradients, Graph, Unary, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

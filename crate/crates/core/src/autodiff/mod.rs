//! Dense tensors and reverse-mode differentiation.
//!
//! A [`Graph`] records each operation as it executes. [`Graph::backward`]
//! replays the record in reverse and leaves d(loss)/d(node) on every node
//! that depends on a parameter. Storage is row-major and reductions run in a
//! fixed sequential order, so identical inputs give bitwise identical results.

mod gradcheck;
mod graph;
mod nn;
mod ops;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

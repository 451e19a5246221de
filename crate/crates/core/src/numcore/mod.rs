//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Training runs in `f32`; finite-difference checks run the same code in
//! `f64`. Broadcasting is limited to leading batch dims (`add_bias`,
//! `expand_mid`); everything else requires matching shapes.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, rel_err};
pub use graph::{gelu_scalar, sigmoid, silu_scalar, Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub mod op_suite;

#[cfg(test)]
mod tests;

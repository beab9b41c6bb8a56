//! Minimal reverse-mode differentiation over dense tensors.
//!
//! Primitives cover what the model needs: matrix multiply, strided 2-D
//! convolution and its transpose, elementwise arithmetic and activations,
//! sum/mean reductions, concatenation, slicing and leading-dimension
//! broadcast. Elementwise binary operands must agree in shape, except that
//! one operand may omit the other's leading (batch) dimension.

mod conv;
mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use conv::ConvGeom;
pub use gradcheck::{grad_check, grad_check_inputs, relative_error, CoordError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests;

//! Tensors, reverse-mode differentiation, seeded randomness and a
//! finite-difference gradient oracle.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with};
pub use rng::{streams, RngState};
pub use tape::{DropoutMask, Gradients, Tape, Var};
pub(crate) use tape::softplus as softplus_value;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
}

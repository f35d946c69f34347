//! Dense tensors, a recording tape with reverse-mode autodiff, and gradient
//! verification helpers.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, finite_diff_check_with_floor};
pub use tape::{backward, checkpointed_backward, ActivationStats, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("numeric error: {0}")]
    NumericError(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl NumericsError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ShapeError(_) => "ShapeError",
            Self::NumericError(_) => "NumericError",
            Self::InvalidArgument(_) => "InvalidArgument",
        }
    }
}

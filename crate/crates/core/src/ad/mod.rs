//! Dense tensors with tape-based reverse-mode differentiation, plus the
//! sparsemax projection and the Adam update used by every optimizer here.

mod adam;
pub mod linalg;
mod ops;
mod sparsemax;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::softplus;
pub use sparsemax::{sparsemax, sparsemax_threshold, sparsemax_vjp};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
    #[error("contract violated: {0}")]
    Contract(String),
}

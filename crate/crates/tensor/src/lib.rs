//! Dense row-major tensors with tape-based reverse-mode automatic
//! differentiation.
//!
//! Every model in the workspace is assembled from the primitives recorded on
//! a [`Tape`]. The element type is generic over [`Scalar`] so the same model
//! code runs in `f32` for training and in `f64` for gradient checking.

mod error;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

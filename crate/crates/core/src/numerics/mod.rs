//! Dense tensors and reverse-mode differentiation for the whole model.

mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, FD_EPS};
pub use scalar::Scalar;
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

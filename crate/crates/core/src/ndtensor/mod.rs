//! Dense tensors, reverse-mode autodiff and a finite-difference oracle.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use tape::{Gradients, Tape, Var, RENORM_FLOOR};
pub use tensor::Tensor;

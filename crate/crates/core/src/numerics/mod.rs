//! Dense tensors, kernels and reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_with, finite_diff_check, finite_diff_check_coords, GradCheckReport};
pub use tape::{AttentionLayout, Tape, Var};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
pub mod ops;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{GruParams, Padding};
pub use tensor::{ComputationTape, Tensor};

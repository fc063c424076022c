//! Tensor math: shapes, reverse-mode autodiff, convolution kernels,
//! the Adam optimizer, and a finite-difference gradient checker.

pub mod adam;
pub mod gemm;
pub mod gradcheck;
pub mod ops;
pub mod scratch;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{check_gradients, check_gradients_scaled, check_gradients_steps, GradReport};
pub use tensor::{grad_enabled, NoGradGuard, Shape, Tensor};

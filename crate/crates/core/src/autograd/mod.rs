//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The tape is implicit and thread-local: ops record themselves while any
//! input tracks gradients, and [`Tensor::backward`] consumes it. Nothing is
//! shared across threads; tape-free math (inside [`no_grad`]) is pure.

mod gradcheck;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_many, gradient_check_outputs, GradCheckReport};
pub use ops::{softmax_with_temperature, Reduction, NORM_FLOOR, PROB_FLOOR};
pub use tape::{no_grad, reset_tape, tape_len};
pub use tensor::Tensor;

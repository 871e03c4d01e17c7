//! Minimal dense tensor algebra with tape-based reverse-mode autodiff.
//!
//! Values live in [`Tensor`], a row-major array generic over the scalar type
//! (`f32` for training, `f64` for finite-difference verification). Every
//! differentiable computation is recorded on a [`Tape`]; [`Tape::backward`]
//! replays it in reverse and accumulates gradients into the leaves that were
//! created with `requires_grad`.

mod error;
mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::{BitRepr, Tensor};

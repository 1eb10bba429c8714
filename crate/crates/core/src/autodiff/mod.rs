//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Tape`] records every forward op in evaluation order; `backward` walks
//! it once in reverse. Tensors use NCHW layout wherever a spatial op is
//! involved. A tape is single-threaded; build one per forward pass.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

//! Reverse-mode differentiation and optimization machinery: a flat
//! tape over dense f64 tensors, a scalar abstraction shared with the
//! offline math, AdamW with warmup/cosine scheduling, and a
//! finite-difference gradient checker.

mod optim;
mod real;
mod tape;
mod tensor;

pub use optim::{grad_check, relative_err, AdamW, GradCheckReport, OptimConfig};
pub use real::Real;
pub use tape::{Tape, Tv};
pub use tensor::{matmul, Tensor};

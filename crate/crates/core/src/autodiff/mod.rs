//! A small dense-tensor library with tape-based reverse-mode
//! differentiation, an AdamW optimizer and a finite-difference gradient
//! checker.
//!
//! Tensors are plain row-major buffers generic over [`Real`]; models run in
//! `f32` and gradient checks in `f64`.

mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, GradCheckReport, Probe, MAX_PROBES_PER_TENSOR, RELATIVE_FLOOR,
};
pub use optim::{AdamState, AdamW};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

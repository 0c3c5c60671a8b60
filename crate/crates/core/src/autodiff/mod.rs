//! Dense-tensor reverse-mode differentiation, sized for this crate's needs.
//!
//! The tape records every forward operation and replays exact backward rules
//! in one reverse sweep. Everything is `f64` and single-threaded; reduction
//! orders are fixed so repeated runs are bit-identical.

mod adam;
mod check;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::finite_diff_check;
pub use tape::{AutodiffError, Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::{glorot_uniform, Tensor};

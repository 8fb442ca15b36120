//! Minimal deterministic numeric core: dense layers, 1D convolution,
//! reverse-mode gradients on a tape, Adam, and finite-difference checking.
//!
//! All arithmetic is `f64`. Forward passes are pure functions of
//! (parameters, input); there is no hidden global state, so two runs with the
//! same seed produce bit-identical trajectories.

mod gradcheck;
mod store;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, GradCheckTarget, GroupReport};
pub use store::{AdamConfig, Checkpoint, ParamId, ParamStore};
pub use tape::{Activation, FrozenContext, Gradients, Tape, ValueId};
pub use tensor::Tensor;

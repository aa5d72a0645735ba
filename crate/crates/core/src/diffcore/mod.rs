//! Minimal reverse-mode differentiation over dense 2-D `f64` tensors.
//!
//! A [`Tape`] records primitive ops as they execute and replays them in
//! reverse to produce gradients. Everything is deterministic: dropout masks
//! come from a counter-keyed generator, and no op depends on thread timing.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GRAD_FLOOR};
pub use tape::{dropout_key, Grads, Tape, Var};
pub use tensor::Tensor;

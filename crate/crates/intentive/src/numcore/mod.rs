//! Minimal differentiable numerical core.
//!
//! Dense 64-bit tensors, a per-forward-pass computation tape with
//! reverse-mode differentiation, and an Adam optimizer. Everything is
//! single-threaded per tape and rebuilt from scratch each forward pass.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

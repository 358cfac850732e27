//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod check;
mod fastmath;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

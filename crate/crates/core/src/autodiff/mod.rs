//! Dense tensors and a reverse-mode tape sized for the control losses.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};

//! Tensor arithmetic, reverse-mode differentiation and optimization.

mod optim;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, global_norm, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{activation, masked_softmax, sigmoid, Activation, Tensor};

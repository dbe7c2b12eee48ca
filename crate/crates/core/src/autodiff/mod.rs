//! Minimal reverse-mode automatic differentiation over dense tensors: the
//! numerical substrate for every network and loss in the crate.

mod sgd;
mod tape;
mod tensor;

pub mod gradcheck;

pub use sgd::Sgd;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Tensors, kernels and the differentiation tape used by the supernet.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{softmax, Gradients, Tape, Var};
pub use tensor::Tensor;

//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod tape;
mod tensor;

pub use tape::{BinaryOp, Elementwise, Segment, Tape, UnaryOp, Var, LAYERNORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;

//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_five_point};
pub use tape::{concat, sigmoid, softplus, Gradients, ParamId, Primitive, Tape, Var};
pub use tensor::Tensor;

//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
pub mod serialize;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use tape::{Gradients, OpAttrs, Primitive, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Real, Tensor};

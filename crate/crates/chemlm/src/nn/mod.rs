//! Dense-tensor compute with reverse-mode differentiation.
//!
//! The substrate for attention and the encoder: linear maps, layer
//! normalization, GELU, softmax, dropout, embedding lookup, and masked
//! cross-entropy, all recorded on a [`Tape`] so gradients compose.

mod tape;
mod tensor;

pub use tape::{gelu_scalar, NnError, Tape, Var};
pub use tensor::{Dtype, Scalar, Tensor};

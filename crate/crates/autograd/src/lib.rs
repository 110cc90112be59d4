//! Reverse-mode automatic differentiation over dense `[N, C, H, W]` tensors.
//!
//! The engine covers exactly the operator set needed by convolutional
//! encoder-decoder generators, patch discriminators and iterative
//! variational optical flow: convolutions, pooling, pointwise maths,
//! finite differences and 3x3 stencils. Everything is single-threaded and
//! deterministic, so identical inputs produce bit-identical gradients.

pub mod check;
pub mod conv;
mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::{ShapeError, Tensor};

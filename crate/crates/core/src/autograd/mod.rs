//! Tape-based reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor) values.
//!
//! Every operation on a [`Tape`] records its inputs and whatever it needs for the
//! backward pass. Parameters are named leaves, so gradients come back keyed by the
//! same names the weight stores use.

mod conv;
mod tape;

pub use conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    ConvGeometry,
};
pub use tape::{Gradients, Tape, Var};

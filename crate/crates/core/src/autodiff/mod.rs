//! Reverse-mode differentiation: a tensor tape for the fitting loops and a
//! scalar tape for small generic kernels.

pub mod scalar;
pub mod tape;

pub use scalar::{Real, ScalarTape, Var};
pub use tape::{softplus, softplus_inv, sigmoid, Backward, GradSink, Gradients, NodeId, Tape, Values};

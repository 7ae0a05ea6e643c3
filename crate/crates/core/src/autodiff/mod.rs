//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass. Leaves created with
//! [`Tape::leaf`] receive gradients; leaves created with [`Tape::constant`]
//! do not, and nothing downstream of constants alone is differentiated.
//! [`Tape::backward`] may run once per tape.

pub mod kernels;
mod ops;
mod special;
mod tape;

pub use special::erf_with_derivative;
pub use tape::{Gradients, OpKind, Tape, Var};

/// LayerNorm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

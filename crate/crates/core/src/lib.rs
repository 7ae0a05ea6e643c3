//! Attention-guided adversarial training for Vision Transformers.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape over `f64`
//! tensors ([`autodiff`]), a ViT whose blocks can drop low-influence
//! embeddings during training ([`vit`], [`policy`]), FGSM/PGD attacks
//! ([`attacks`]), an exact FLOPs model ([`flops`]), data loaders ([`data`])
//! and the Fast-AT training harness ([`train`]).

// `!(x < y)` is how validation rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod policy;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Locas: a locally-supported parametric memory for test-time training.
//!
//! The crate provides a tiny decoder-only transformer backbone with
//! swappable FFN variants, sideway key-value memory modules (MLP and GLU)
//! with principled initializations, a non-linear SVD compression routine
//! for the MLP memory, and a streaming language-modeling harness for
//! desk-scale experiments.

pub mod backbone;
pub mod ckpt;
pub mod error;
pub mod harness;
pub mod lora;
pub mod memory;
pub mod nlsvd;
pub mod tensor;
pub mod util;

pub use error::{LocasError, Result};

//! Concept erasure for causal transformer text encoders by high-level
//! representation misdirection.
//!
//! Only the first encoder block is trained. The loss is measured at a later
//! supervision point (by default the attention output projection of the final
//! block) and pulls target-prompt activations toward random, semantic, or
//! safety vectors.

pub mod analysis;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod misdirection;
pub mod persistence;
pub mod tensor;

pub use error::{Error, Result};

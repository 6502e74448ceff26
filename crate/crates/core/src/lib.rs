//! Diversified multiplet upcycling on a toy dual encoder.
//!
//! A small two-tower contrastive model is fine-tuned through several
//! cluster-then-contrast stages that each leave behind a new set of
//! feed-forward weights. Those sets become the experts of a sparse
//! mixture-of-experts model whose routers are then trained on their own.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mcl;
pub mod moe;
pub mod optim;
pub mod param;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};

//! Self-speculative decoding with sparse-attention drafting.
//!
//! One model drafts tokens while attending to a small selected subset of its
//! KV cache, then verifies them with full attention. Verification doubles as
//! the signal for the next draft's selection.

pub mod attention;
pub mod cli;
mod error;
pub mod harness;
pub mod kv;
pub mod model;
pub mod rng;
pub mod selection;
pub mod speculation;

pub use error::{Error, Result};

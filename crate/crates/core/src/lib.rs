//! Few-shot classification with a semantic-alignment head.
//!
//! Region features are scored against frozen class-name embeddings by a
//! scaled-cosine classifier ([`classifier`]), optionally enriched by
//! cross-attention to those embeddings ([`fusion`]), and trained with a
//! margin loss whose per-pair margins come from embedding similarity
//! ([`embeddings`], [`losses`]). Every backward pass is hand derived and
//! checked against finite differences ([`gradsuite`]).
//!
//! [`harness`] reproduces the two-stage transfer protocol on synthetic data:
//! base training with a linear classifier, then K-shot fine-tuning of the new
//! head on a frozen backbone.

pub mod classifier;
pub mod embeddings;
mod error;
pub mod fusion;
pub mod gradsuite;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numerics;

pub use error::{Error, Result};

//! Hybrid sparse/dense retrieval with multi-stage list-aware re-ranking.
//!
//! The crate implements a three-stage ranking cascade: candidate retrieval
//! (BM25, learned-impact, and hashed dense vectors fused per query), a
//! pointwise interaction scorer trained with consistency regularization, and
//! a small list-aware transformer over the candidate list. Everything is
//! self-contained and deterministic under a fixed seed.

pub mod book;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod hlatr;
pub mod pipeline;
pub mod rerank;
pub mod sparse;

pub use error::{Error, Result};

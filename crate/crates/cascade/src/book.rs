//! The guide from `book/` mounted as modules so every code block in it
//! compiles and runs as a doc-test against the current crate.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}

#[doc = include_str!("../../../book/src/corpus.md")]
pub mod corpus {}

#[doc = include_str!("../../../book/src/sparse.md")]
pub mod sparse {}

#[doc = include_str!("../../../book/src/dense.md")]
pub mod dense {}

#[doc = include_str!("../../../book/src/fusion.md")]
pub mod fusion {}

#[doc = include_str!("../../../book/src/rerank.md")]
pub mod rerank {}

#[doc = include_str!("../../../book/src/hlatr.md")]
pub mod hlatr {}

#[doc = include_str!("../../../book/src/maxp.md")]
pub mod maxp {}

#[doc = include_str!("../../../book/src/eval.md")]
pub mod eval {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

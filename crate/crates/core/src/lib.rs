//! Entrainment toolkit for task-oriented dialogue corpora.
//!
//! The crate measures how strongly system responses reuse the wording of the
//! user turns they answer (lexical and syntactic entrainment, frequent-word
//! alignment, BLEU), and prepares entrainment-optimized training artifacts:
//! per-instance weights, user-likelihood losses with verified gradients,
//! attention-based keyword selection, and an n-gram rerank baseline.
//!
//! All corpus data flows through one JSONL exchange schema (see [`corpus`]);
//! every operation is deterministic given its inputs and seed.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod keywords;
pub mod metrics;
pub mod objective;
pub mod postag;
pub mod rerank;
pub mod weighting;

pub use error::{Error, Result};

/// Toolkit version, embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

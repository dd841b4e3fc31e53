//! Extreme multi-label text classification: label2vec label embeddings,
//! balanced hierarchical label trees, contrastive text-label matching,
//! per-level linear rankers, beam-search inference, and XMC metrics.

pub mod data;
pub mod error;
pub mod hlt;
pub mod inference;
pub mod label2vec;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod ranker;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};

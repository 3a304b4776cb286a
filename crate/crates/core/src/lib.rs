//! Synthetic conversational query rewriting: data model, rewrite synthesis,
//! leakage auditing, text metrics, dense retrieval, a tiny seq2seq
//! rewriter with preference training, and an end-to-end RAG pipeline.

pub mod datamodel;
pub mod error;
pub mod leakage;
pub mod pipeline;
pub mod preftrain;
pub mod retrieval;
pub mod selftest;
pub mod synthesis;
pub mod textmetrics;
pub mod tinyseq2seq;
pub mod toy;

pub use error::{Error, Result};

//! Sparse-autoencoder feature probing of LLM paper summaries against
//! bibliometric quality quartiles.
//!
//! The pipeline runs ingest → quartile binning → summarization →
//! featurization → tree probing → reporting. Text generation and SAE
//! encoding sit behind backend traits so the whole flow runs against
//! deterministic mocks as well as real model servers.

pub mod corpus;
pub mod featurize;
pub mod interpret;
pub mod journal;
pub mod pipeline;
pub mod probe;
pub mod summarize;
pub mod synthetic;

//! Iterative demonstration selection (IDS) for in-context learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: JSONL task datasets, label normalization, subsampling.
//! - [`embedding`]: embedding providers, the content-addressed cache, cosine.
//! - [`selectors`]: KNN, random, k-means cluster and MMR demonstration selection.
//! - [`llm`]: chat providers (HTTP, scripted, record/replay), prompt rendering, response parsing.
//! - [`pipeline`]: the IDS loop, self-consistency baselines, voting, evaluation and run persistence.
//! - [`metrics`]: query/demonstration similarity, pairwise diversity and iteration-overlap diagnostics.

pub mod corpus;
mod http;
pub mod embedding;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod selectors;

pub use corpus::{Dataset, Example, TaskKind};
pub use http::RetryPolicy;
pub use embedding::{cosine, Embedder, EmbeddingVector, OfflineEmbedder};
pub use llm::{Answer, ChatProvider, GenerationParams, ParsedResponse, PromptMode};
pub use pipeline::{majority_vote, IterationTrace, RunConfig, RunRecord, Strategy};
pub use selectors::DemonstrationSet;

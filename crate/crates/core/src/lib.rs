//! Diversified recommendation through a tree of preferences.
//!
//! The crate is organised as one module per pipeline stage:
//!
//! - [`corpus`]: dataset model, ingestion, validation, per-user splits and a
//!   synthetic exposure-biased dataset generator.
//! - [`textenc`]: deterministic feature-hashing text encoder, cosine similarity,
//!   k-means and the diversity-preserving item sampler.
//! - [`llm`]: prompt rendering, response parsing, retrying transport, response
//!   cache and the deterministic mock backend.
//! - [`top`]: the preference tree (construction, item assignment, load refinement,
//!   persistence).
//! - [`reasoner`]: per-user leaf selection, candidate retrieval and leaf frequencies.
//! - [`augment`]: relevance/diversity scoring and synthetic interaction generation.
//! - [`recmodel`]: MF and LightGCN backbones trained with BPR and Adam.
//! - [`influence`]: k-step user influence, gradient sketching and the dynamic
//!   augmentation loop.
//! - [`rerank`]: MMR, DPP and random-augmentation baselines.
//! - [`evalkit`]: Recall@k, Category-Entropy@k and trade-off reports.
//! - [`pipeline`]: run configuration and the stage functions behind the `toprec` binary.

pub mod augment;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod influence;
pub mod llm;
pub mod pipeline;
pub mod reasoner;
pub mod recmodel;
pub mod rerank;
pub mod textenc;
pub mod top;
mod util;

pub use error::{Error, Result};

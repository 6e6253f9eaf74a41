//! Corpus tooling for entity-aware denoising pre-training of MT models.
//!
//! The pipeline links entities in monolingual text against a multilingual
//! knowledge base, packs text into subword-bounded segments, produces DAE and
//! DEEP (entity code-switching) noised training pairs, mixes them with
//! parallel data under a subword budget, and scores system output with corpus
//! BLEU and entity translation accuracy.

pub mod config;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod kb;
pub mod linker;
pub mod noise;
pub mod pipeline;
pub mod seed;
pub mod sampler;
pub mod subword;
pub mod synth;

pub use error::{Error, Result};

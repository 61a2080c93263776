//! Retrieval-augmented question answering with iterative context compression.
//!
//! The pipeline: rank documents ([`retrieval`]), compress them segment by
//! segment until the compressor judges the context sufficient
//! ([`compression`]), answer from the compressed context ([`reader`]) and
//! score the answers ([`eval`]). [`datagen`] builds supervised training data
//! for the compressor from a teacher model.

pub mod batch;
pub mod compression;
pub mod corpus;
pub mod datagen;
pub mod eval;
pub mod provider;
pub mod reader;
pub mod retrieval;
pub mod template;

pub use compression::{
    compress, compress_batch, CompactConfig, CompressionResult, CompressionStep, Compressor, Condition,
};
pub use corpus::{Document, QaExample, TokenCount};
pub use datagen::{DatasetBuilder, Scenario, ScenarioSpec, TrainingInstance};
pub use eval::{aggregate, EvalRecord, EvalReport};
pub use provider::{GenerationRequest, Provider, ProviderError};
pub use reader::{ContextMode, Reader, ReaderAnswer};
pub use retrieval::{Bm25Index, Bm25Params, RetrievalHit};

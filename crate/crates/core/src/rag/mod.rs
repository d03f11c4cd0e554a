//! Retrieval-augmented impression generation: embedding index, MMR
//! diversification, prompt assembly and filtered best-of-N generation.

mod generate;
mod index;
mod prompt;

use thiserror::Error;

use crate::chat::ChatError;

pub use generate::{
    count_sentences, generate_with_filter, passes_filter, select_best, DecodingParams, GenerationRequest,
    GenerationResult, MIN_CHARS,
};
pub use index::{index_topk, mmr_select, retrieve, EmbeddingIndex, MmrConfig, Retrieved};
pub use prompt::{assemble_prompt, escape, extract_examples, unescape, RagPrompt, SYSTEM_MESSAGE};

#[derive(Debug, Error)]
pub enum RagError {
    #[error("embedding index is empty")]
    EmptyIndex,
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("k = {k} outside 1..={available}")]
    InvalidK { k: usize, available: usize },
    #[error("row {0} is not unit-normalized")]
    NotNormalized(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("generation unavailable: {0}")]
    GenerationUnavailable(#[from] ChatError),
}

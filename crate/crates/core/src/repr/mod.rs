//! Slice and text embeddings, low-rank adapters, slice aggregation and the
//! residual projector.

mod aggregate;
mod lora;
pub mod nn;
mod projector;
mod providers;

use ndarray::Array1;
use thiserror::Error;

pub use aggregate::{
    aggregate_attention, aggregate_lite_transformer, aggregate_mean, AggCache, AggregatorKind, AggregatorParams,
    AttentionPoolParams, LiteTransformerParams, LITE_HEADS,
};
pub use lora::{lora_apply, AdaptedLinear, LoraAdapter};
pub use projector::{project, ProjectorCache, ProjectorParams};
pub use providers::{
    downsample, embed_slices, embed_text, text_key, text_tokens, FileSliceStore, FileTextStore, SliceEmbedder, SliceRecord,
    TextEmbedder, TextRecord, ToyTextEncoder, ToyVisionEncoder, TEXT_BUCKETS, TOY_GRID,
};

/// Default embedding width.
pub const EMBED_DIM: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum ReprError {
    #[error("no embedding stored for {0}")]
    MissingEmbedding(String),
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("{count} slices exceed the positional table ({capacity})")]
    TooManySlices { count: usize, capacity: usize },
    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),
    #[error("embedding store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Array1<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn new(values: Array1<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding::new(Array1::from(v))
    }
}

pub fn l2_normalize(x: &Embedding) -> Result<Embedding, ReprError> {
    let n = x.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(ReprError::ZeroVector);
    }
    Ok(Embedding {
        values: &x.values / n,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_examples() {
        let e = l2_normalize(&Embedding::from(vec![3.0, 4.0])).unwrap();
        assert_eq!(e.values, array![0.6, 0.8]);
        assert!(e.normalized);
        let u = Embedding::from(vec![0.6, 0.8]);
        let again = l2_normalize(&u).unwrap();
        assert!((&again.values - &u.values).iter().all(|d| d.abs() <= 1e-12));
        assert_eq!(l2_normalize(&Embedding::from(vec![0.0, 0.0])), Err(ReprError::ZeroVector));
    }
}

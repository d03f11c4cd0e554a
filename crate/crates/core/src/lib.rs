//! Vision-language toolkit for CT enterography volumes.
//!
//! The crate covers the full desk-scale pipeline: volume ingestion and
//! windowed slice encoding, pluggable slice/text embedding providers with
//! low-rank adapters, three slice-aggregation geometries, a multi-positive
//! contrastive objective with analytic gradients, duplicate-aware retrieval
//! and ordinal evaluation, rule-based pseudolabeling with teacher consensus,
//! and retrieval-augmented impression generation plumbing.

pub mod chat;
pub mod config;
pub mod encoding;
pub mod eval;
pub mod labeler;
pub mod parallel;
pub mod pipeline;
pub mod rag;
pub mod repr;
pub mod synth;
pub mod train;
pub mod volume;

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

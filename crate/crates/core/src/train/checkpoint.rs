//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `VLCTCKPT` |
//! | 4 | format version (u32) |
//! | 4 | header length `H` (u32) |
//! | H | UTF-8 JSON [`CheckpointHeader`] |
//! | 8 * n | every tensor value as f64, in header order |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use super::TrainError;

pub const MAGIC: &[u8; 8] = b"VLCTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub module_versions: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn module_versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("vlct-core".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint".to_string(), FORMAT_VERSION.to_string()),
    ])
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(params: &ModelParams, model: &ModelConfig, seed: u64, epoch: usize) -> Vec<u8> {
    let tensors = params.tensors();
    let header = CheckpointHeader {
        model: model.clone(),
        seed,
        epoch,
        module_versions: module_versions(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, CheckpointHeader), TrainError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let mut params = ModelParams::init(&header.model, 0).map_err(|e| bad(e.to_string()))?;
    let mut payload = bytes[16 + hlen..].chunks_exact(8);
    {
        let slots = params.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad(format!(
                "{} tensors in header, model expects {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for ((name, dst), entry) in slots.into_iter().zip(&header.tensors) {
            if name != entry.name || dst.len() != entry.len {
                return Err(bad(format!("tensor {} does not match model slot {name}", entry.name)));
            }
            for d in dst.iter_mut() {
                let c = payload.next().ok_or_else(|| bad("truncated payload"))?;
                *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
    }
    if payload.next().is_some() || !payload.remainder().is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((params, header))
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    model: &ModelConfig,
    seed: u64,
    epoch: usize,
) -> Result<(), TrainError> {
    fs::write(path, encode_checkpoint(params, model, seed, epoch)).map_err(|e| bad(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointHeader), TrainError> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

//! Run configuration: one TOML file, every field optional.
//!
//! ```toml
//! seed = 0
//!
//! [paths]
//! manifest = "data/manifest.jsonl"
//! reports = "data/reports.jsonl"
//! labels = "data/labels.jsonl"   # optional reference labels
//! out_dir = "runs/default"
//!
//! [encoding]          # slice planning and windows
//! [model]             # aggregator, adapter ranks, projector, temperature
//! [train]             # optimizer and early stopping
//! [split]             # patient-level train/val/test fractions
//! [eval]              # retrieval cut-offs and probe settings
//! [labeling]          # teacher endpoint prefixes (env vars hold URLs and keys)
//! [providers]         # toy encoders or precomputed embedding stores
//! [rag]               # MMR, decoding, best-of-N, generator endpoint prefix
//! [synth]             # synthetic dataset written by `vlct synth`
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{EncodingConfig, MontageConfig};
use crate::eval::ProbeConfig;
use crate::rag::{DecodingParams, MmrConfig};
use crate::synth::SyntheticSpec;
use crate::train::{ModelConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub reports: PathBuf,
    pub labels: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.jsonl".into(),
            reports: "data/reports.jsonl".into(),
            labels: None,
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub probe: ProbeConfig,
    /// Draws for the simulated within-1 chance row.
    pub monte_carlo_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            probe: ProbeConfig::default(),
            monte_carlo_draws: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LabelingConfig {
    /// Environment prefixes of exactly three teacher endpoints, or none for
    /// rule-only labels.
    pub teachers: Vec<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProviderConfig {
    /// Seeded random-projection encoders.
    Toy { dim: usize, rank: usize },
    /// Precomputed embeddings keyed by study/plane/index and text hash.
    Files { slices: PathBuf, texts: PathBuf },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Toy {
            dim: crate::repr::EMBED_DIM,
            rank: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RagConfig {
    pub mmr: MmrConfig,
    pub decoding: DecodingParams,
    pub best_of: u32,
    pub max_retries: u32,
    /// Environment prefix of the generation endpoint. Without it the
    /// nearest retrieved impression stands in for the generated text.
    pub generator: Option<String>,
    pub attach_montage: bool,
    pub montage: MontageConfig,
    pub timeout_secs: u64,
}

impl Default for RagConfig {
    fn default() -> Self {
        Self {
            mmr: MmrConfig::default(),
            decoding: DecodingParams::default(),
            best_of: 4,
            max_retries: 3,
            generator: None,
            attach_montage: true,
            montage: MontageConfig::default(),
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Isotropic voxel size applied at ingest, in millimetres.
    pub voxel_mm: f64,
    pub paths: PathsConfig,
    pub encoding: EncodingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub labeling: LabelingConfig,
    pub providers: ProviderConfig,
    pub rag: RagConfig,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            voxel_mm: 1.0,
            paths: PathsConfig::default(),
            encoding: EncodingConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            eval: EvalConfig::default(),
            labeling: LabelingConfig {
                teachers: Vec::new(),
                max_in_flight: 4,
                timeout_secs: 60,
            },
            providers: ProviderConfig::default(),
            rag: RagConfig::default(),
            synth: SyntheticSpec::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl RunConfig {
    /// Parses TOML; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.resolve_paths(base);
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            e => e,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.manifest);
        fix(&mut self.paths.reports);
        fix(&mut self.paths.out_dir);
        if let Some(l) = self.paths.labels.as_mut() {
            fix(l);
        }
        if let ProviderConfig::Files { slices, texts } = &mut self.providers {
            fix(slices);
            fix(texts);
        }
    }

    /// Sets the run seed. The training seed always follows it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoding.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        self.rag.mmr.validate().map_err(|e| invalid(e.to_string()))?;
        self.synth.validate().map_err(|e| invalid(e.to_string()))?;
        let s = &self.split;
        if [s.train, s.val, s.test].iter().any(|&f| f <= 0.0) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split fractions {s:?} must be positive and sum to 1")));
        }
        if !(self.voxel_mm > 0.0 && self.voxel_mm.is_finite()) {
            return Err(invalid(format!("voxel_mm {} must be positive", self.voxel_mm)));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(invalid("eval.ks needs positive cut-offs"));
        }
        if !self.labeling.teachers.is_empty() && self.labeling.teachers.len() != 3 {
            return Err(invalid("labeling.teachers needs exactly three entries or none"));
        }
        let d = &self.rag.decoding;
        if d.min_new_tokens == 0 || d.max_new_tokens <= d.min_new_tokens || self.rag.best_of == 0 {
            return Err(invalid("rag decoding needs max_new_tokens > min_new_tokens > 0 and best_of > 0"));
        }
        if self.model.max_slices < self.encoding.max_slices() {
            return Err(invalid(format!(
                "model.max_slices {} is below the {} planned slices",
                self.model.max_slices,
                self.encoding.max_slices()
            )));
        }
        let m = &self.model;
        if m.dim != m.vision_in || m.dim != m.text_in {
            return Err(invalid("model.dim, model.vision_in and model.text_in must be equal"));
        }
        let (dim, rank) = match &self.providers {
            ProviderConfig::Toy { dim, rank } => (Some(*dim), *rank),
            ProviderConfig::Files { .. } => (None, 1),
        };
        if rank == 0 || dim.is_some_and(|d| d != self.model.vision_in || d != self.model.text_in) {
            return Err(invalid("toy provider dim must equal model.vision_in and model.text_in"));
        }
        Ok(())
    }

    /// Canonical TOML of the whole configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn hash(&self) -> String {
        crate::sha256_hex(self.canonical().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.canonical(), Path::new("")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn paper_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.train.lr, c.train.weight_decay, c.train.batch_size), (5e-5, 1e-2, 8));
        assert_eq!((c.train.max_epochs, c.train.patience, c.train.clip_norm), (10, 3, 1.0));
        assert_eq!((c.rag.mmr.pool_size, c.rag.mmr.k, c.rag.mmr.lambda), (50, 5, 0.7));
        assert_eq!((c.rag.best_of, c.rag.max_retries), (4, 3));
        assert_eq!(c.eval.probe.c, 1.0);
        assert_eq!(c.encoding.max_slices(), 28);
    }

    #[test]
    fn partial_file_and_relative_paths() {
        let cfg = RunConfig::from_toml(
            "seed = 9\n[paths]\nmanifest = \"m.jsonl\"\n[model]\naggregator = \"attention\"\n[providers]\nkind = \"toy\"\ndim = 512\nrank = 2\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.paths.manifest, PathBuf::from("/base/m.jsonl"));
        assert_eq!(cfg.model.aggregator, crate::repr::AggregatorKind::Attention);
        cfg.validate().unwrap();
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = RunConfig::default();
        c.split.test = 0.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.labeling.teachers = vec!["A".into()];
        assert!(c.validate().is_err());
        assert!(matches!(
            RunConfig::from_toml("seed = \"x\"", Path::new("")),
            Err(ConfigError::Parse { .. })
        ));
    }
}

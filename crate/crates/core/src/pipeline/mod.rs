//! Stage orchestration over a run directory.
//!
//! A run directory holds `config.toml`, `config.sha256`, `versions.json`,
//! one sub-directory per stage (each finished stage leaves a `done.json`
//! stamp) and the consolidated `report.jsonl` / `report.txt`. Unless an
//! explicit directory is given, runs live under `paths.out_dir/<hash prefix>`.

mod io;
mod report;
mod split;
mod stages;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ChatClient, Endpoint, HttpChatClient};
use crate::config::RunConfig;
use crate::labeler::Teacher;

pub use report::{build_report, render_text, write_report, ReportRow};
pub use split::{patient_split, Split};
pub use stages::{LabelRow, StudyRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Ingest,
    Label,
    Encode,
    Train,
    EvalRetrieval,
    EvalClassify,
    Rag,
    GenEval,
}

impl Stage {
    pub const CHAIN: [Stage; 8] = [
        Stage::Ingest,
        Stage::Label,
        Stage::Encode,
        Stage::Train,
        Stage::EvalRetrieval,
        Stage::EvalClassify,
        Stage::Rag,
        Stage::GenEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Label => "label",
            Stage::Encode => "encode",
            Stage::Train => "train",
            Stage::EvalRetrieval => "eval-retrieval",
            Stage::EvalClassify => "eval-classify",
            Stage::Rag => "rag",
            Stage::GenEval => "gen-eval",
        }
    }

    pub fn dir_name(self) -> String {
        self.name().replace('-', "_")
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Ingest | Stage::Label => &[],
            Stage::Encode => &[Stage::Ingest],
            Stage::Train => &[Stage::Encode, Stage::Label],
            Stage::EvalRetrieval | Stage::EvalClassify | Stage::Rag => &[Stage::Train],
            Stage::GenEval => &[Stage::Rag],
        }
    }

    /// Stage names plus `all` for the whole chain.
    pub fn parse_selection(s: &str) -> Result<Vec<Stage>, PipelineError> {
        if s == "all" {
            return Ok(Stage::CHAIN.to_vec());
        }
        s.parse().map(|st| vec![st])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::CHAIN
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Validation(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("stage {stage} needs {missing} to run first")]
    MissingPrerequisite { stage: Stage, missing: Stage },
    #[error("run directory {} was created by config {found}, current config is {expected}", dir.display())]
    ConfigHashMismatch {
        dir: PathBuf,
        expected: String,
        found: String,
    },
    #[error("stage {stage} failed: {message}")]
    Failed { stage: Stage, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// 2 for validation problems, 3 for missing prerequisites, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Validation(_) | PipelineError::ConfigHashMismatch { .. } => 2,
            PipelineError::MissingPrerequisite { .. } => 3,
            PipelineError::Failed { .. } | PipelineError::Io { .. } => 1,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    stage: Stage,
    config_hash: String,
}

pub struct Pipeline {
    cfg: RunConfig,
    hash: String,
    dir: PathBuf,
    generator: Option<Box<dyn ChatClient>>,
    teachers: Vec<Teacher>,
}

impl Pipeline {
    /// Validates the configuration and binds it to a run directory.
    pub fn open(cfg: RunConfig, out: Option<&Path>) -> Result<Self, PipelineError> {
        cfg.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        let hash = cfg.hash();
        let dir = match out {
            Some(d) => d.to_path_buf(),
            None => cfg.paths.out_dir.join(&hash[..12]),
        };
        io::create_dir(&dir)?;
        let hash_path = dir.join("config.sha256");
        if hash_path.exists() {
            let found = io::read_string(&hash_path)?.trim().to_string();
            if found != hash {
                return Err(PipelineError::ConfigHashMismatch {
                    dir,
                    expected: hash,
                    found,
                });
            }
        } else {
            io::write_string(&dir.join("config.toml"), &cfg.canonical())?;
            io::write_json(&dir.join("versions.json"), &crate::train::module_versions())?;
            io::write_string(&hash_path, &format!("{hash}\n"))?;
        }
        Ok(Self {
            cfg,
            hash,
            dir,
            generator: None,
            teachers: Vec::new(),
        })
    }

    pub fn with_generator(mut self, client: Box<dyn ChatClient>) -> Self {
        self.generator = Some(client);
        self
    }

    pub fn with_teachers(mut self, teachers: Vec<Teacher>) -> Self {
        self.teachers = teachers;
        self
    }

    /// Builds the teacher and generator clients named in the configuration
    /// from `<PREFIX>_BASE_URL`, `<PREFIX>_MODEL` and `<PREFIX>_API_KEY`.
    pub fn connect_endpoints(mut self) -> Result<Self, PipelineError> {
        let connect = |prefix: &str, timeout: u64| {
            Endpoint::from_env(prefix)
                .map(|ep| HttpChatClient::new(prefix, ep, Duration::from_secs(timeout)).with_retries(3, Duration::from_secs(2)))
                .map_err(|e| PipelineError::Validation(e.to_string()))
        };
        if self.teachers.is_empty() {
            for prefix in &self.cfg.labeling.teachers {
                let client = connect(prefix, self.cfg.labeling.timeout_secs)?;
                self.teachers.push(Teacher {
                    name: prefix.clone(),
                    client: Box::new(client),
                });
            }
        }
        if self.generator.is_none() {
            if let Some(prefix) = &self.cfg.rag.generator {
                let client = connect(prefix, self.cfg.rag.timeout_secs)?.with_multimodal(self.cfg.rag.attach_montage);
                self.generator = Some(Box::new(client));
            }
        }
        Ok(self)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.dir_name())
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("done.json")
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        io::read_json::<Stamp>(&self.stamp_path(stage)).is_ok_and(|s| s.config_hash == self.hash)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageStatus, PipelineError> {
        if let Some(&missing) = stage.prerequisites().iter().find(|&&p| !self.is_complete(p)) {
            return Err(PipelineError::MissingPrerequisite { stage, missing });
        }
        if self.is_complete(stage) {
            log::info!("{stage}: cached artifacts for config {} are current, skipping", &self.hash[..12]);
            return Ok(StageStatus::Cached);
        }
        io::create_dir(&self.stage_dir(stage))?;
        log::info!("{stage}: running");
        stages::run(self, stage)?;
        io::write_json(
            &self.stamp_path(stage),
            &Stamp {
                stage,
                config_hash: self.hash.clone(),
            },
        )?;
        write_report(&self.dir)?;
        Ok(StageStatus::Ran)
    }

    /// Runs stages in order, stopping at the first error.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<(Stage, StageStatus)>, PipelineError> {
        let mut out = Vec::new();
        for &s in stages {
            out.push((s, self.run_stage(s)?));
        }
        if out.iter().all(|(_, st)| *st == StageStatus::Cached) {
            write_report(&self.dir)?;
        }
        Ok(out)
    }
}

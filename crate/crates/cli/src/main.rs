use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use vlct_core::config::RunConfig;
use vlct_core::pipeline::{Pipeline, PipelineError, Stage, StageStatus};
use vlct_core::synth;

/// Volumetric CT vision-language pipeline.
#[derive(Debug, Parser)]
#[command(name = "vlct", version)]
struct Cli {
    /// ingest, label, encode, train, eval-retrieval, eval-classify, rag,
    /// gen-eval, all, or synth
    stage: String,
    /// TOML run configuration; defaults apply to omitted fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (for synth: dataset directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| PipelineError::Validation(e.to_string()))?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn run_synth(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    let mut spec = cfg.synth.clone();
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let dir = match &cli.out {
        Some(d) => d.clone(),
        None => cfg.paths.manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let studies = synth::generate(&spec).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let paths = synth::write_dataset(&dir, &studies).map_err(|e| PipelineError::Failed {
        stage: Stage::Ingest,
        message: e.to_string(),
    })?;
    println!("wrote {} studies to {}", studies.len(), paths.manifest.display());
    Ok(())
}

fn run_stages(cli: &Cli) -> Result<(), PipelineError> {
    let stages = Stage::parse_selection(&cli.stage)?;
    if cli.config.is_none() {
        return Err(PipelineError::Validation("--config is required for pipeline stages".into()));
    }
    let cfg = load_config(cli)?;
    let pipeline = Pipeline::open(cfg, cli.out.as_deref())?.connect_endpoints()?;
    for (stage, status) in pipeline.run(&stages)? {
        match status {
            StageStatus::Ran => println!("{stage}: done"),
            StageStatus::Cached => println!("{stage}: cached artifacts are current, nothing to do"),
        }
    }
    println!("report: {}", pipeline.dir().join("report.txt").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = if cli.stage == "synth" { run_synth(&cli) } else { run_stages(&cli) };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

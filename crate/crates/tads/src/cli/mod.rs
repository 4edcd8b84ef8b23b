//! Command-line pipeline orchestration.
//!
//! One binary drives the whole curation run: it reads a TOML config,
//! executes stages in dependency order (or a single `--stage`), and keeps
//! a run manifest with checksums so finished work is never repeated.
//! Process exit codes classify failures: 2 for configuration errors, 3 for
//! missing dependencies or a locked output directory, 4 for data errors.

mod config;
mod manifest;
mod report;
mod stages;

pub use config::{
    CalibrateStageConfig, InputConfig, PipelineConfig, QualityStageConfig, RelevanceStageConfig,
    SCHEMA_VERSION,
};
pub use manifest::{
    ArtifactRef, LockGuard, MlpSnapshot, RunManifest, RunTimings, StageRecord, LOCK_FILE,
    MANIFEST_FILE, TIMINGS_FILE,
};
pub use report::build_report;
pub use stages::{
    CalibrationFile, ClustersFile, DvnModelFile, FdoHistoryFile, KMeansSnapshot, QualityModelFile,
    QualityScoresFile, RelevanceFile, Runner, SelectionFile, CALIBRATION_FILE, CLUSTERS_FILE,
    CORPUS_MANIFEST_FILE, DEDUP_REPORT_FILE, DVN_MODEL_FILE, FDO_HISTORY_FILE, QUALITY_MODEL_FILE,
    QUALITY_SCORES_FILE, RELEVANCE_FILE, REPORT_FILE, SELECTED_IDS_FILE, SELECTION_FILE, SYNTH_DIR,
};

use std::fmt;
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::error::{Result, TadsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum StageName {
    Synth,
    Ingest,
    Dedup,
    Quality,
    Relevance,
    Diversity,
    TrainDvn,
    Select,
    Report,
    Calibrate,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Synth => "synth",
            StageName::Ingest => "ingest",
            StageName::Dedup => "dedup",
            StageName::Quality => "quality",
            StageName::Relevance => "relevance",
            StageName::Diversity => "diversity",
            StageName::TrainDvn => "train-dvn",
            StageName::Select => "select",
            StageName::Report => "report",
            StageName::Calibrate => "calibrate",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Task-aware data curation pipeline over precomputed embeddings.
#[derive(Debug, Parser)]
#[command(name = "tads", version)]
pub struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,

    /// Output directory for artifacts and the run manifest.
    #[arg(long)]
    pub out: PathBuf,

    /// Re-run stages even when their outputs are up to date.
    #[arg(long)]
    pub force: bool,

    /// Run a single stage instead of the full pipeline.
    #[arg(long, value_enum)]
    pub stage: Option<StageName>,

    /// Override the master seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Entry point behind `main`: load and validate the config, lock the
/// output directory, and run the requested stage or the full pipeline.
pub fn run(cli: &Cli) -> Result<()> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let config_dir = cli.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&cli.out).map_err(|e| TadsError::io(&cli.out, e))?;
    let _lock = LockGuard::acquire(&cli.out)?;
    let mut runner = Runner::new(config, config_dir, cli.out.clone(), cli.force)?;
    match cli.stage {
        Some(stage) => {
            runner.run_stage(stage)?;
        }
        None => runner.run_default_pipeline()?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_parse_from_kebab_case() {
        use clap::ValueEnum;
        assert_eq!(StageName::from_str("train-dvn", false).unwrap(), StageName::TrainDvn);
        assert_eq!(StageName::from_str("dedup", false).unwrap(), StageName::Dedup);
        assert!(StageName::from_str("bogus", false).is_err());
    }

    #[test]
    fn cli_parses_flags() {
        let cli = Cli::parse_from([
            "tads",
            "--config",
            "pipeline.toml",
            "--out",
            "runs/a",
            "--stage",
            "train-dvn",
            "--seed",
            "7",
            "--force",
        ]);
        assert_eq!(cli.stage, Some(StageName::TrainDvn));
        assert_eq!(cli.seed, Some(7));
        assert!(cli.force);
    }

    #[test]
    fn missing_config_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cli = Cli::parse_from([
            "tads",
            "--config",
            dir.path().join("nope.toml").to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ]);
        let err = run(&cli).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

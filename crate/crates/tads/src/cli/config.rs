//! Pipeline configuration: one TOML file with a section per stage.
//!
//! Every section deserializes into the owning module's config type, so the
//! file mirrors the library API one to one. Unknown keys anywhere are
//! rejected up front, and all sections validate before any stage runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dedup::DedupConfig;
use crate::diversity::DiversityConfig;
use crate::dvn::DvnConfig;
use crate::error::{Result, TadsError};
use crate::fdo::FdoConfig;
use crate::quality::{LabelingFunction, QualityTrainConfig};
use crate::relevance::RELEVANCE_EPSILON;
use crate::synth::SynthSpec;

/// Bumped whenever the config layout changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

/// Where the raw corpus lives. Paths are resolved relative to the config
/// file. When the section is absent entirely, the pipeline consumes the
/// output of its own `synth` stage instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub records: PathBuf,
    pub embeddings: PathBuf,
    /// Task manifest; required by the relevance and train-dvn stages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    /// Embedding block whose text half embeds per-sample OCR strings,
    /// row-aligned with the corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityStageConfig {
    pub train: QualityTrainConfig,
    /// Synthetic gold set size; half positives, half constructed negatives.
    pub gold_set_size: usize,
    /// EM iterations when fitting the labeling-function accuracy model.
    pub em_iters: usize,
    /// Threshold rules voting on the feature vector; empty uses the stock
    /// rule set.
    pub labeling_functions: Vec<LabelingFunction>,
}

impl Default for QualityStageConfig {
    fn default() -> Self {
        QualityStageConfig {
            train: QualityTrainConfig::default(),
            gold_set_size: 64,
            em_iters: 50,
            labeling_functions: Vec::new(),
        }
    }
}

impl QualityStageConfig {
    fn validate(&self) -> Result<()> {
        if self.gold_set_size < 2 {
            return Err(TadsError::InvalidConfig("quality.gold_set_size must be >= 2".into()));
        }
        if self.em_iters == 0 {
            return Err(TadsError::InvalidConfig("quality.em_iters must be >= 1".into()));
        }
        for f in &self.labeling_functions {
            f.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelevanceStageConfig {
    /// Denominator smoothing of the profile normalization.
    pub epsilon: f64,
}

impl Default for RelevanceStageConfig {
    fn default() -> Self {
        RelevanceStageConfig { epsilon: RELEVANCE_EPSILON }
    }
}

/// Threshold grid swept by the calibrate stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateStageConfig {
    pub edit_values: Vec<usize>,
    pub sem_values: Vec<f64>,
}

impl Default for CalibrateStageConfig {
    fn default() -> Self {
        CalibrateStageConfig {
            edit_values: vec![2, 3, 5, 8, 12],
            sem_values: vec![0.80, 0.85, 0.90, 0.92, 0.95, 0.98],
        }
    }
}

impl CalibrateStageConfig {
    fn validate(&self) -> Result<()> {
        if self.edit_values.is_empty() || self.sem_values.is_empty() {
            return Err(TadsError::InvalidConfig(
                "calibrate threshold grids must be non-empty".into(),
            ));
        }
        if self.sem_values.iter().any(|&s| !(-1.0..=1.0).contains(&s)) {
            return Err(TadsError::InvalidConfig(
                "calibrate.sem_values must lie in [-1, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Master seed; every stage derives its own named stream from it.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<InputConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    pub dedup: DedupConfig,
    pub quality: QualityStageConfig,
    pub relevance: RelevanceStageConfig,
    pub diversity: DiversityConfig,
    pub dvn: DvnConfig,
    pub fdo: FdoConfig,
    pub calibrate: CalibrateStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            input: None,
            synth: None,
            dedup: DedupConfig::default(),
            quality: QualityStageConfig::default(),
            relevance: RelevanceStageConfig::default(),
            diversity: DiversityConfig::default(),
            dvn: DvnConfig::default(),
            fdo: FdoConfig::default(),
            calibrate: CalibrateStageConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses and fully validates a config file.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            TadsError::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| TadsError::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(TadsError::InvalidConfig(format!(
                "schema_version {} not supported, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.input.is_none() && self.synth.is_none() {
            return Err(TadsError::InvalidConfig(
                "provide an [input] section or a [synth] section".into(),
            ));
        }
        if !(self.relevance.epsilon.is_finite() && self.relevance.epsilon > 0.0) {
            return Err(TadsError::InvalidConfig(format!(
                "relevance.epsilon = {}, need a finite value > 0",
                self.relevance.epsilon
            )));
        }
        self.dedup.validate()?;
        self.quality.validate()?;
        self.diversity.validate()?;
        self.dvn.validate()?;
        self.fdo.validate()?;
        self.calibrate.validate()?;
        if let Some(synth) = &self.synth {
            synth.validate()?;
        }
        Ok(())
    }

    /// Canonical serialized form, hashed into the run manifest.
    pub fn snapshot_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec_pretty(self).map_err(|e| TadsError::json("config snapshot", e))
    }
}

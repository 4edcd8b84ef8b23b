//! Stage execution: the dependency DAG, per-stage fingerprints, artifact
//! schemas, and the runner that ties them together.
//!
//! Each stage reads validated artifacts of its upstream stages, writes its
//! own atomically, and records outputs with checksums in the run manifest.
//! A stage whose fingerprint (config section, seeds, upstream checksums)
//! matches the manifest and whose outputs are intact is skipped.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, read_text_block, sha256_file, Corpus, SampleRecord};
use crate::dedup::{
    calibrate_thresholds, metadata_dedup, run_dedup_pipeline, semantic_dedup, CalibrationPoint,
    DedupReport,
};
use crate::diversity::{cluster_pool, diversity_factor, ClusterAssignment};
use crate::dvn::{dvn_forward_many, DvnParams, ValueProfile};
use crate::error::{Result, TadsError};
use crate::fdo::{final_select, run_fdo, IterationLog};
use crate::numeric::{DenseMatrix, KMeansModel, RngStream};
use crate::proxy::load_evaluators;
use crate::quality::{
    apply_lfs, build_true_label_set, default_labeling_functions, extract_features,
    fit_label_model, predict_quality, train_quality_predictor, weak_labels, LabelModel,
    OperatorFeatureVector, QualityTrainConfig,
};
use crate::relevance::{load_task_supports, read_task_manifest, relevance_profile};
use crate::synth::generate_corpus;

use super::config::PipelineConfig;
use super::manifest::{
    sha256_bytes, write_bytes_atomic, write_json_atomic, ArtifactRef, MlpSnapshot, RunManifest,
    RunTimings,
};
use super::report::build_report;
use super::StageName;

pub const CORPUS_MANIFEST_FILE: &str = "corpus_manifest.json";
pub const DEDUP_REPORT_FILE: &str = "dedup_report.json";
pub const QUALITY_MODEL_FILE: &str = "quality_model.json";
pub const QUALITY_SCORES_FILE: &str = "quality_scores.json";
pub const RELEVANCE_FILE: &str = "relevance_profiles.json";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const DVN_MODEL_FILE: &str = "dvn_model.json";
pub const FDO_HISTORY_FILE: &str = "fdo_history.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const SELECTED_IDS_FILE: &str = "selected_ids.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const SYNTH_DIR: &str = "synth";

/// Value scores sit strictly inside (0, 1); a saturated sigmoid output is
/// nudged off the boundary before entering a value profile.
const SCORE_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityModelFile {
    pub net: MlpSnapshot,
    pub config: QualityTrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityScoresFile {
    /// Refined-pool sample ids, aligned with every vector in this file.
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub weak_labels: Vec<f64>,
    pub training_curve: Vec<f64>,
    pub label_model: LabelModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelevanceFile {
    pub task_ids: Vec<String>,
    pub epsilon: f64,
    pub ids: Vec<String>,
    /// Normalized per-task relevance, one row per id.
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansSnapshot {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub seed: u64,
    pub iterations_run: usize,
    pub sse_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClustersFile {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Diversity factor per id under the configured (delta, epsilon).
    pub factors: Vec<f64>,
    pub model: KMeansSnapshot,
}

impl ClustersFile {
    pub fn assignment(&self) -> Result<ClusterAssignment> {
        let model = KMeansModel {
            k: self.model.k,
            centroids: DenseMatrix::from_rows(&self.model.centroids)?,
            seed: self.model.seed,
            iterations_run: self.model.iterations_run,
            sse_trace: self.model.sse_trace.clone(),
        };
        ClusterAssignment::from_labels(self.labels.clone(), self.model.k, model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DvnModelFile {
    pub quality_head: MlpSnapshot,
    pub relevance_head: MlpSnapshot,
    pub diversity_head: MlpSnapshot,
    pub fusion: MlpSnapshot,
    pub l2_coefficient: f64,
    pub seed: u64,
}

impl DvnModelFile {
    pub fn of(params: &DvnParams) -> DvnModelFile {
        DvnModelFile {
            quality_head: MlpSnapshot::of(&params.quality_head),
            relevance_head: MlpSnapshot::of(&params.relevance_head),
            diversity_head: MlpSnapshot::of(&params.diversity_head),
            fusion: MlpSnapshot::of(&params.fusion),
            l2_coefficient: params.l2_coefficient,
            seed: params.seed,
        }
    }

    pub fn restore(&self) -> Result<DvnParams> {
        Ok(DvnParams {
            quality_head: self.quality_head.restore()?,
            relevance_head: self.relevance_head.restore()?,
            diversity_head: self.diversity_head.restore()?,
            fusion: self.fusion.restore()?,
            l2_coefficient: self.l2_coefficient,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdoHistoryFile {
    pub reward_history: Vec<f64>,
    pub iterations: Vec<IterationLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionFile {
    pub threshold: f64,
    /// Raw pool size before deduplication.
    pub pool_size: usize,
    pub refined_size: usize,
    /// All refined ids with their value scores, in refined-pool order.
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub selected_ids: Vec<String>,
}

impl SelectionFile {
    pub fn selection_ratio(&self) -> f64 {
        self.selected_ids.len() as f64 / self.pool_size as f64
    }

    /// Scores of the selected ids, in selection order.
    pub fn selected_scores(&self) -> Vec<f64> {
        let index: std::collections::HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        self.selected_ids.iter().map(|id| self.scores[index[id.as_str()]]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub points: Vec<CalibrationPoint>,
}

/// Input files a run reads, after resolving the config against either the
/// explicit `[input]` section or the synth stage's output directory.
#[derive(Debug, Clone)]
pub struct ResolvedInput {
    pub records: PathBuf,
    pub embeddings: PathBuf,
    pub tasks: Option<PathBuf>,
    pub ocr_embeddings: Option<PathBuf>,
}

pub struct Runner {
    config: PipelineConfig,
    config_dir: PathBuf,
    out_dir: PathBuf,
    force: bool,
    manifest: RunManifest,
    timings: RunTimings,
    master: RngStream,
}

impl Runner {
    /// Builds a runner over an output directory the caller has locked.
    /// An existing manifest is carried forward so unchanged stages can
    /// short-circuit; its identity fields are refreshed to this run.
    pub fn new(
        config: PipelineConfig,
        config_dir: PathBuf,
        out_dir: PathBuf,
        force: bool,
    ) -> Result<Runner> {
        let config_sha256 = sha256_bytes(&config.snapshot_json()?);
        let manifest = match RunManifest::load(&out_dir)? {
            Some(mut previous) => {
                previous.engine_version = env!("CARGO_PKG_VERSION").to_string();
                previous.config_sha256 = config_sha256;
                previous.master_seed = config.seed;
                previous
            }
            None => RunManifest::fresh(config_sha256, config.seed),
        };
        let timings = RunTimings::load(&out_dir);
        let master = RngStream::new(config.seed, "pipeline");
        Ok(Runner { config, config_dir, out_dir, force, manifest, timings, master })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn stage_stream(&self, stage: StageName) -> RngStream {
        self.master.derive(stage.as_str())
    }

    /// Direct upstream stages whose outputs must be present.
    fn upstream(&self, stage: StageName) -> Vec<StageName> {
        use StageName::*;
        match stage {
            Synth => vec![],
            Ingest if self.config.input.is_none() => vec![Synth],
            Ingest => vec![],
            Calibrate => vec![Ingest],
            Dedup => vec![Ingest],
            Quality | Relevance | Diversity => vec![Dedup],
            TrainDvn => vec![Quality, Relevance, Diversity],
            Select => vec![TrainDvn],
            Report => vec![Ingest, Dedup, Quality, Relevance, Diversity, TrainDvn, Select],
        }
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_dir.join(p)
        }
    }

    pub fn resolve_input(&self) -> ResolvedInput {
        match &self.config.input {
            Some(input) => ResolvedInput {
                records: self.resolve_path(&input.records),
                embeddings: self.resolve_path(&input.embeddings),
                tasks: input.tasks.as_deref().map(|p| self.resolve_path(p)),
                ocr_embeddings: input.ocr_embeddings.as_deref().map(|p| self.resolve_path(p)),
            },
            None => {
                let dir = self.out_dir.join(SYNTH_DIR);
                let tasks = dir.join("tasks.json");
                ResolvedInput {
                    records: dir.join("records.jsonl"),
                    embeddings: dir.join("embeddings.tdsemb"),
                    tasks: tasks.exists().then_some(tasks),
                    ocr_embeddings: None,
                }
            }
        }
    }

    fn tasks_path(&self) -> Result<PathBuf> {
        self.resolve_input().tasks.ok_or_else(|| {
            TadsError::InvalidConfig(
                "a task manifest is required: set input.tasks or declare tasks under [synth]"
                    .into(),
            )
        })
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let input = self.resolve_input();
        corpus::ingest(&input.records, &input.embeddings)
    }

    /// Survivor ids with their record positions, from the dedup report.
    fn refined(&self, corpus: &Corpus) -> Result<(Vec<String>, Vec<usize>)> {
        let report: DedupReport = self.read_artifact(DEDUP_REPORT_FILE)?;
        let by_id: std::collections::HashMap<&str, usize> = corpus
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let mut positions = Vec::with_capacity(report.survivors.len());
        for id in &report.survivors {
            let &pos = by_id.get(id.as_str()).ok_or_else(|| {
                TadsError::CorpusMismatch(format!(
                    "dedup survivor '{id}' is not in the corpus; re-run dedup"
                ))
            })?;
            positions.push(pos);
        }
        Ok((report.survivors, positions))
    }

    fn read_artifact<T: for<'de> Deserialize<'de>>(&self, file: &str) -> Result<T> {
        super::manifest::read_json(&self.out_dir.join(file))
    }

    fn artifact_sha(&self, file: &str) -> String {
        sha256_file(&self.out_dir.join(file)).unwrap_or_else(|_| format!("absent:{file}"))
    }

    fn file_sha(path: &Path) -> String {
        sha256_file(path).unwrap_or_else(|_| format!("absent:{}", path.display()))
    }

    /// Whether the stage draws from the master-seeded stream, making its
    /// output depend on the seed. The synthetic corpus runs off its own
    /// seed in the spec, and the remaining stages are deterministic maps
    /// of their inputs.
    fn uses_master_seed(stage: StageName) -> bool {
        use StageName::*;
        matches!(stage, Dedup | Quality | Diversity | TrainDvn | Calibrate)
    }

    /// Everything a stage's result depends on, digested: engine version,
    /// the master seed where it matters, the config section, upstream
    /// output checksums, and any directly read files outside the DAG.
    fn fingerprint(&self, stage: StageName) -> Result<String> {
        let section = self.section_json(stage)?;
        let seed = if Self::uses_master_seed(stage) { self.config.seed } else { 0 };
        let mut acc = format!(
            "tads-{}|seed:{seed}|{}|{}",
            env!("CARGO_PKG_VERSION"),
            stage.as_str(),
            sha256_bytes(&section)
        );
        for upstream in self.upstream(stage) {
            acc.push('|');
            acc.push_str(upstream.as_str());
            if let Some(record) = self.manifest.stages.get(upstream.as_str()) {
                for artifact in &record.outputs {
                    acc.push('|');
                    acc.push_str(&artifact.sha256);
                }
            }
        }
        for extra in self.fingerprint_extras(stage) {
            acc.push('|');
            acc.push_str(&extra);
        }
        Ok(sha256_bytes(acc.as_bytes()))
    }

    fn section_json(&self, stage: StageName) -> Result<Vec<u8>> {
        use StageName::*;
        let value = match stage {
            Synth => serde_json::to_vec(&self.config.synth),
            Ingest => serde_json::to_vec(&self.config.input),
            Dedup => serde_json::to_vec(&self.config.dedup),
            Quality => serde_json::to_vec(&self.config.quality),
            Relevance => serde_json::to_vec(&self.config.relevance),
            Diversity => serde_json::to_vec(&self.config.diversity),
            // Training is blind to the selection threshold, so it is left
            // out here and owned by the select stage alone.
            TrainDvn => serde_json::to_vec(&(
                &self.config.dvn,
                &self.config.fdo.meta,
                &self.config.fdo.proxy,
                self.config.fdo.iterations,
                self.config.fdo.dvn_learning_rate,
            )),
            Select => serde_json::to_vec(&self.config.fdo.threshold),
            Report => serde_json::to_vec(&()),
            Calibrate => serde_json::to_vec(&(&self.config.dedup, &self.config.calibrate)),
        };
        value.map_err(|e| TadsError::json("config section", e))
    }

    fn fingerprint_extras(&self, stage: StageName) -> Vec<String> {
        use StageName::*;
        let input = self.resolve_input();
        let corpus_checksum = || {
            self.manifest.input_checksum.clone().unwrap_or_else(|| "uningested".to_string())
        };
        match stage {
            Synth => vec![],
            Ingest => {
                let mut extras =
                    vec![Self::file_sha(&input.records), Self::file_sha(&input.embeddings)];
                if let Some(t) = &input.tasks {
                    extras.push(Self::file_sha(t));
                }
                if let Some(o) = &input.ocr_embeddings {
                    extras.push(Self::file_sha(o));
                }
                extras
            }
            Dedup | Diversity | Calibrate => vec![corpus_checksum()],
            Quality => {
                let mut extras = vec![corpus_checksum()];
                if let Some(o) = &input.ocr_embeddings {
                    extras.push(Self::file_sha(o));
                }
                extras
            }
            Relevance => {
                let mut extras = vec![corpus_checksum()];
                if let Some(t) = &input.tasks {
                    extras.push(Self::file_sha(t));
                }
                extras
            }
            TrainDvn => {
                let mut extras = vec![corpus_checksum(), self.artifact_sha(DEDUP_REPORT_FILE)];
                if let Some(t) = &input.tasks {
                    extras.push(Self::file_sha(t));
                }
                extras
            }
            Select => vec![
                corpus_checksum(),
                self.artifact_sha(DEDUP_REPORT_FILE),
                self.artifact_sha(QUALITY_SCORES_FILE),
                self.artifact_sha(RELEVANCE_FILE),
                self.artifact_sha(CLUSTERS_FILE),
            ],
            Report => vec![
                self.artifact_sha(CORPUS_MANIFEST_FILE),
                self.artifact_sha(DEDUP_REPORT_FILE),
                self.artifact_sha(QUALITY_SCORES_FILE),
                self.artifact_sha(RELEVANCE_FILE),
                self.artifact_sha(CLUSTERS_FILE),
                self.artifact_sha(FDO_HISTORY_FILE),
                self.artifact_sha(SELECTION_FILE),
            ],
        }
    }

    /// Runs one stage through the gate: dependency check, fingerprint
    /// short-circuit, execution, manifest update. Returns whether the
    /// stage actually executed.
    pub fn run_stage(&mut self, stage: StageName) -> Result<bool> {
        for upstream in self.upstream(stage) {
            if !self.manifest.stage_present(upstream.as_str(), &self.out_dir) {
                return Err(TadsError::dependency(upstream.as_str()));
            }
        }
        let fingerprint = self.fingerprint(stage)?;
        if !self.force && self.manifest.stage_up_to_date(stage.as_str(), &fingerprint, &self.out_dir)
        {
            println!("stage {stage}: up to date, skipped");
            return Ok(false);
        }
        let started = Instant::now();
        let outputs = self.execute(stage)?;
        let wall_ms = started.elapsed().as_millis() as u64;

        let mut refs = Vec::with_capacity(outputs.len());
        for path in &outputs {
            let rel = path
                .strip_prefix(&self.out_dir)
                .map_err(|_| {
                    TadsError::Index(format!(
                        "stage output {} escaped the run directory",
                        path.display()
                    ))
                })?
                .to_string_lossy()
                .into_owned();
            refs.push(ArtifactRef { path: rel, sha256: sha256_file(path)? });
        }
        self.manifest.stages.insert(
            stage.as_str().to_string(),
            super::manifest::StageRecord {
                fingerprint,
                stream_seed: self.stage_stream(stage).child_seed(),
                outputs: refs,
            },
        );
        self.manifest.store(&self.out_dir)?;
        self.timings.record(stage.as_str(), wall_ms, &self.out_dir)?;
        println!("stage {stage}: done in {wall_ms} ms ({} outputs)", outputs.len());
        Ok(true)
    }

    /// The standard end-to-end order. A config without an `[input]`
    /// section starts by generating its own corpus.
    pub fn run_default_pipeline(&mut self) -> Result<()> {
        use StageName::*;
        let mut stages = Vec::new();
        if self.config.input.is_none() {
            stages.push(Synth);
        }
        stages.extend([Ingest, Dedup, Quality, Relevance, Diversity, TrainDvn, Select, Report]);
        for stage in stages {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn execute(&mut self, stage: StageName) -> Result<Vec<PathBuf>> {
        match stage {
            StageName::Synth => self.execute_synth(),
            StageName::Ingest => self.execute_ingest(),
            StageName::Dedup => self.execute_dedup(),
            StageName::Quality => self.execute_quality(),
            StageName::Relevance => self.execute_relevance(),
            StageName::Diversity => self.execute_diversity(),
            StageName::TrainDvn => self.execute_train_dvn(),
            StageName::Select => self.execute_select(),
            StageName::Report => self.execute_report(),
            StageName::Calibrate => self.execute_calibrate(),
        }
    }

    fn execute_synth(&mut self) -> Result<Vec<PathBuf>> {
        let spec = self.config.synth.clone().ok_or_else(|| {
            TadsError::InvalidConfig("stage synth requires a [synth] section".into())
        })?;
        let dir = self.out_dir.join(SYNTH_DIR);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| TadsError::io(&dir, e))?;
        }
        generate_corpus(&spec, &dir)?;
        let mut outputs: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| TadsError::io(&dir, e))?
            .map(|entry| entry.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| TadsError::io(&dir, e))?;
        outputs.sort();
        Ok(outputs)
    }

    fn execute_ingest(&mut self) -> Result<Vec<PathBuf>> {
        let input = self.resolve_input();
        let corpus = corpus::ingest(&input.records, &input.embeddings)?;
        if let Some(tasks) = &input.tasks {
            read_task_manifest(tasks)?;
        }
        if let Some(ocr) = &input.ocr_embeddings {
            let block = read_text_block(ocr)?;
            if block.rows() != corpus.records.len() {
                return Err(TadsError::CorpusMismatch(format!(
                    "{} OCR embedding rows for {} records",
                    block.rows(),
                    corpus.records.len()
                )));
            }
        }
        let path = self.out_dir.join(CORPUS_MANIFEST_FILE);
        write_json_atomic(&path, &corpus.manifest)?;
        self.manifest.input_checksum = Some(corpus.manifest.checksum.clone());
        Ok(vec![path])
    }

    fn execute_dedup(&mut self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus()?;
        let stream = self.stage_stream(StageName::Dedup);
        let (_, report) = run_dedup_pipeline(&corpus, &self.config.dedup, &stream)?;
        let path = self.out_dir.join(DEDUP_REPORT_FILE);
        write_json_atomic(&path, &report)?;
        Ok(vec![path])
    }

    fn execute_quality(&mut self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus()?;
        let (ids, positions) = self.refined(&corpus)?;
        let input = self.resolve_input();
        let ocr = input.ocr_embeddings.as_deref().map(read_text_block).transpose()?;
        let cfg = &self.config.quality;

        let lfs = if cfg.labeling_functions.is_empty() {
            default_labeling_functions()
        } else {
            cfg.labeling_functions.clone()
        };
        let features: Vec<OperatorFeatureVector> = positions
            .iter()
            .map(|&p| extract_features(&corpus.records[p], &corpus.block, ocr.as_ref()))
            .collect::<Result<_>>()?;
        let votes: Vec<Vec<i8>> =
            features.iter().map(|f| apply_lfs(f, &lfs)).collect::<Result<_>>()?;
        let label_model = fit_label_model(&votes, cfg.em_iters)?;
        let weak = weak_labels(&label_model, &votes);

        let refined_records: Vec<SampleRecord> =
            positions.iter().map(|&p| corpus.records[p].clone()).collect();
        let stream = self.stage_stream(StageName::Quality);
        let gold = build_true_label_set(
            &refined_records,
            &corpus.block,
            ocr.as_ref(),
            &stream.derive("gold"),
            cfg.gold_set_size,
        )?;
        let (predictor, curve) =
            train_quality_predictor(&features, &weak, &gold, &cfg.train, &stream.derive("train"))?;
        let scores: Vec<f64> = features
            .iter()
            .map(|f| predict_quality(&predictor, f))
            .collect::<Result<_>>()?;

        let model_path = self.out_dir.join(QUALITY_MODEL_FILE);
        write_json_atomic(
            &model_path,
            &QualityModelFile {
                net: MlpSnapshot::of(&predictor.net),
                config: predictor.config.clone(),
                seed: predictor.seed,
            },
        )?;
        let scores_path = self.out_dir.join(QUALITY_SCORES_FILE);
        write_json_atomic(
            &scores_path,
            &QualityScoresFile { ids, scores, weak_labels: weak, training_curve: curve, label_model },
        )?;
        Ok(vec![model_path, scores_path])
    }

    fn execute_relevance(&mut self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus()?;
        let (ids, positions) = self.refined(&corpus)?;
        let supports = load_task_supports(&self.tasks_path()?)?;
        let epsilon = self.config.relevance.epsilon;
        let mut vectors = Vec::with_capacity(positions.len());
        for &p in &positions {
            let image = corpus.block.image_row(corpus.records[p].embedding_index)?;
            vectors.push(relevance_profile(image, &supports, epsilon)?.values);
        }
        let path = self.out_dir.join(RELEVANCE_FILE);
        write_json_atomic(
            &path,
            &RelevanceFile {
                task_ids: supports.iter().map(|s| s.task_id.clone()).collect(),
                epsilon,
                ids,
                vectors,
            },
        )?;
        Ok(vec![path])
    }

    fn execute_diversity(&mut self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus()?;
        let (ids, positions) = self.refined(&corpus)?;
        let rows: Vec<usize> =
            positions.iter().map(|&p| corpus.records[p].embedding_index).collect();
        let cfg = &self.config.diversity;
        let assignment =
            cluster_pool(&corpus.block, &rows, cfg, &self.stage_stream(StageName::Diversity))?;
        let factors: Vec<f64> = (0..rows.len())
            .map(|i| diversity_factor(&assignment, i, cfg))
            .collect::<Result<_>>()?;
        let centroids: Vec<Vec<f64>> =
            assignment.model.centroids.iter_rows().map(<[f64]>::to_vec).collect();
        let path = self.out_dir.join(CLUSTERS_FILE);
        write_json_atomic(
            &path,
            &ClustersFile {
                ids,
                labels: assignment.labels.clone(),
                sizes: assignment.sizes.clone(),
                factors,
                model: KMeansSnapshot {
                    k: assignment.model.k,
                    centroids,
                    seed: assignment.model.seed,
                    iterations_run: assignment.model.iterations_run,
                    sse_trace: assignment.model.sse_trace.clone(),
                },
            },
        )?;
        Ok(vec![path])
    }

    /// Joins the three characterization artifacts into aligned value
    /// profiles, failing loudly when their id lists disagree.
    fn load_profiles(
        &self,
        ids: &[String],
    ) -> Result<(Vec<ValueProfile>, RelevanceFile, ClustersFile)> {
        let quality: QualityScoresFile = self.read_artifact(QUALITY_SCORES_FILE)?;
        let relevance: RelevanceFile = self.read_artifact(RELEVANCE_FILE)?;
        let clusters: ClustersFile = self.read_artifact(CLUSTERS_FILE)?;
        for (name, other) in [
            (QUALITY_SCORES_FILE, &quality.ids),
            (RELEVANCE_FILE, &relevance.ids),
            (CLUSTERS_FILE, &clusters.ids),
        ] {
            if other != ids {
                return Err(TadsError::CorpusMismatch(format!(
                    "{name} covers a different id set than the dedup report; re-run its stage"
                )));
            }
        }
        let mut profiles = Vec::with_capacity(ids.len());
        for i in 0..ids.len() {
            let quality_score =
                quality.scores[i].clamp(SCORE_MARGIN, 1.0 - SCORE_MARGIN);
            profiles.push(ValueProfile::new(
                quality_score,
                crate::relevance::RelevanceVector {
                    values: relevance.vectors[i].clone(),
                    epsilon: relevance.epsilon,
                },
                clusters.factors[i],
            )?);
        }
        Ok((profiles, relevance, clusters))
    }

    fn execute_train_dvn(&mut self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus()?;
        let (ids, positions) = self.refined(&corpus)?;
        let (profiles, relevance, clusters) = self.load_profiles(&ids)?;

        let tasks_path = self.tasks_path()?;
        let task_manifest = read_task_manifest(&tasks_path)?;
        let evaluators = load_evaluators(&tasks_path, &task_manifest)?;
        let evaluator_ids: Vec<&str> = evaluators.iter().map(|e| e.task_id.as_str()).collect();
        if relevance.task_ids != evaluator_ids {
            return Err(TadsError::CorpusMismatch(format!(
                "relevance profiles cover tasks {:?} but the manifest defines {:?}",
                relevance.task_ids, evaluator_ids
            )));
        }

        let rows: Vec<usize> =
            positions.iter().map(|&p| corpus.records[p].embedding_index).collect();
        let pool = crate::fdo::FdoPool::new(
            profiles,
            corpus.block.image().gather_rows(&rows)?,
            corpus.block.text().gather_rows(&rows)?,
        )?;
        let assignment = clusters.assignment()?;

        let stream = self.stage_stream(StageName::TrainDvn);
        let mut params = DvnParams::seeded(
            relevance.task_ids.len(),
            &self.config.dvn,
            &stream.derive("init"),
        )?;
        let (state, logs) =
            run_fdo(&mut params, &pool, &evaluators, &assignment, &self.config.fdo, &stream.derive("fdo"))?;

        let model_path = self.out_dir.join(DVN_MODEL_FILE);
        write_json_atomic(&model_path, &DvnModelFile::of(&params))?;
        let history_path = self.out_dir.join(FDO_HISTORY_FILE);
        write_json_atomic(
            &history_path,
            &FdoHistoryFile { reward_history: state.reward_history, iterations: logs },
        )?;
        Ok(vec![model_path, history_path])
    }

    fn execute_select(&mut self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus()?;
        let (ids, _) = self.refined(&corpus)?;
        let (profiles, _, _) = self.load_profiles(&ids)?;
        let model: DvnModelFile = self.read_artifact(DVN_MODEL_FILE)?;
        let params = model.restore()?;
        let threshold = self.config.fdo.threshold;

        let scores = dvn_forward_many(&params, &profiles)?;
        let selected = final_select(&params, &profiles, threshold)?;
        let selected_ids: Vec<String> = selected.iter().map(|&i| ids[i].clone()).collect();
        let report: DedupReport = self.read_artifact(DEDUP_REPORT_FILE)?;

        let selection_path = self.out_dir.join(SELECTION_FILE);
        write_json_atomic(
            &selection_path,
            &SelectionFile {
                threshold,
                pool_size: report.input_count,
                refined_size: ids.len(),
                ids,
                scores,
                selected_ids: selected_ids.clone(),
            },
        )?;
        let ids_path = self.out_dir.join(SELECTED_IDS_FILE);
        let mut lines = selected_ids.join("\n");
        lines.push('\n');
        write_bytes_atomic(&ids_path, lines.as_bytes())?;
        Ok(vec![selection_path, ids_path])
    }

    fn execute_report(&mut self) -> Result<Vec<PathBuf>> {
        let corpus_manifest = self.read_artifact(CORPUS_MANIFEST_FILE)?;
        let dedup: DedupReport = self.read_artifact(DEDUP_REPORT_FILE)?;
        let quality: QualityScoresFile = self.read_artifact(QUALITY_SCORES_FILE)?;
        let relevance: RelevanceFile = self.read_artifact(RELEVANCE_FILE)?;
        let clusters: ClustersFile = self.read_artifact(CLUSTERS_FILE)?;
        let history: FdoHistoryFile = self.read_artifact(FDO_HISTORY_FILE)?;
        let selection: SelectionFile = self.read_artifact(SELECTION_FILE)?;
        let text = build_report(
            &self.manifest,
            &corpus_manifest,
            &dedup,
            &quality,
            &relevance,
            &clusters,
            &history,
            &selection,
        );
        let path = self.out_dir.join(REPORT_FILE);
        write_bytes_atomic(&path, text.as_bytes())?;
        Ok(vec![path])
    }

    fn execute_calibrate(&mut self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus()?;
        let cfg = &self.config.dedup;
        let all: Vec<usize> = (0..corpus.records.len()).collect();
        let (kept, _) = metadata_dedup(&corpus.records, &all, cfg);
        let semantic = semantic_dedup(
            &corpus.records,
            &kept,
            &corpus.block,
            cfg,
            &self.stage_stream(StageName::Calibrate),
        )?;
        let points = calibrate_thresholds(
            &corpus.records,
            &semantic.clusters,
            &corpus.block,
            &self.config.calibrate.edit_values,
            &self.config.calibrate.sem_values,
        )?;
        let path = self.out_dir.join(CALIBRATION_FILE);
        write_json_atomic(&path, &CalibrationFile { points })?;
        Ok(vec![path])
    }
}

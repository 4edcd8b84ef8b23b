//! Task relevance against prototype support sets.
//!
//! Each downstream task contributes a support set of unit-norm prototype
//! embeddings. A sample's raw relevance to a task is its mean cosine
//! similarity to that task's prototypes; stacking the per-task scores and
//! L2-normalizing (with a small epsilon guarding the all-zero case) gives
//! the relevance profile consumed by the value network.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::read_text_block;
use crate::error::{Result, TadsError};
use crate::numeric::{cosine_similarity, norm, DenseMatrix};

pub const RELEVANCE_EPSILON: f64 = 1e-8;

/// How a task's held-out validation data is scored by the proxy evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    ZeroshotClassification,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSupportSet {
    pub task_id: String,
    /// Unit-norm prototype embeddings, one per row.
    pub prototypes: DenseMatrix,
    /// Non-negative mixing weight for the meta reward.
    pub weight: f64,
    pub evaluator_kind: EvaluatorKind,
}

impl TaskSupportSet {
    /// Validates and re-normalizes prototype rows.
    pub fn new(
        task_id: impl Into<String>,
        prototypes: DenseMatrix,
        weight: f64,
        evaluator_kind: EvaluatorKind,
    ) -> Result<Self> {
        let task_id = task_id.into();
        if prototypes.rows() == 0 {
            return Err(TadsError::DegenerateInput(format!(
                "task {task_id} has an empty support set"
            )));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(TadsError::InvalidConfig(format!(
                "task {task_id} has weight {weight}, need a finite value >= 0"
            )));
        }
        let mut prototypes = prototypes;
        for i in 0..prototypes.rows() {
            let row = prototypes.row_mut(i);
            let n = norm(row);
            if n == 0.0 {
                return Err(TadsError::Norm(format!(
                    "task {task_id} prototype {i} is the zero vector"
                )));
            }
            for v in row {
                *v /= n;
            }
        }
        Ok(TaskSupportSet { task_id, prototypes, weight, evaluator_kind })
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

/// L2-normalized per-task relevance profile of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVector {
    pub values: Vec<f64>,
    pub epsilon: f64,
}

impl RelevanceVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    /// Index of the most relevant task; `None` when the profile is all-zero.
    pub fn argmax_task(&self) -> Option<usize> {
        let (i, &best) = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))?;
        (best != 0.0).then_some(i)
    }
}

/// Mean cosine similarity between a sample embedding and every prototype
/// in one support set.
pub fn task_relevance(sample_emb: &[f64], support: &TaskSupportSet) -> Result<f64> {
    let mut total = 0.0;
    for proto in support.prototypes.iter_rows() {
        total += cosine_similarity(sample_emb, proto)?;
    }
    Ok(total / support.prototypes.rows() as f64)
}

/// Scales a raw per-task score vector to `v / (|v| + epsilon)`.
pub fn normalized_relevance(raw: &[f64], epsilon: f64) -> RelevanceVector {
    let n = norm(raw);
    let values = raw.iter().map(|r| r / (n + epsilon)).collect();
    RelevanceVector { values, epsilon }
}

/// Full relevance profile of one sample across all tasks.
pub fn relevance_profile(
    sample_emb: &[f64],
    supports: &[TaskSupportSet],
    epsilon: f64,
) -> Result<RelevanceVector> {
    if supports.is_empty() {
        return Err(TadsError::InvalidConfig("no task support sets configured".into()));
    }
    let raw: Vec<f64> = supports
        .iter()
        .map(|s| task_relevance(sample_emb, s))
        .collect::<Result<_>>()?;
    Ok(normalized_relevance(&raw, epsilon))
}

/// One task's entry in the on-disk task manifest. Paths are resolved
/// relative to the manifest file. Validation data is only needed by the
/// feedback loop; relevance scoring uses the prototypes alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifestEntry {
    pub task_id: String,
    pub weight: f64,
    pub evaluator_kind: EvaluatorKind,
    pub prototype_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub tasks: Vec<TaskManifestEntry>,
}

pub fn read_task_manifest(path: &Path) -> Result<TaskManifest> {
    let bytes = std::fs::read(path).map_err(|e| TadsError::io(path, e))?;
    let manifest: TaskManifest = serde_json::from_slice(&bytes)
        .map_err(|e| TadsError::json(format!("task manifest {}", path.display()), e))?;
    if manifest.tasks.is_empty() {
        return Err(TadsError::InvalidConfig(format!(
            "task manifest {} lists no tasks",
            path.display()
        )));
    }
    let mut seen = BTreeSet::new();
    for t in &manifest.tasks {
        if !seen.insert(t.task_id.as_str()) {
            return Err(TadsError::InvalidConfig(format!(
                "task id {} appears twice in {}",
                t.task_id,
                path.display()
            )));
        }
    }
    Ok(manifest)
}

pub fn write_task_manifest(path: &Path, manifest: &TaskManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| TadsError::json("task manifest", e))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| TadsError::io(path, e))
}

/// Resolves a manifest-relative path against the manifest's directory.
pub fn resolve_manifest_path(manifest_path: &Path, entry_path: &Path) -> PathBuf {
    if entry_path.is_absolute() {
        entry_path.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(entry_path)
    }
}

/// Loads every task's support set, reading prototype blocks relative to
/// the manifest location and checking they share one embedding dimension.
pub fn load_task_supports(manifest_path: &Path) -> Result<Vec<TaskSupportSet>> {
    let manifest = read_task_manifest(manifest_path)?;
    let mut supports = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let proto_path = resolve_manifest_path(manifest_path, &entry.prototype_path);
        let prototypes = read_text_block(&proto_path)?;
        supports.push(TaskSupportSet::new(
            entry.task_id.clone(),
            prototypes,
            entry.weight,
            entry.evaluator_kind,
        )?);
    }
    let dims: BTreeSet<usize> = supports.iter().map(TaskSupportSet::dim).collect();
    if dims.len() > 1 {
        return Err(TadsError::Shape(format!(
            "support sets disagree on embedding dimension: {dims:?}"
        )));
    }
    Ok(supports)
}

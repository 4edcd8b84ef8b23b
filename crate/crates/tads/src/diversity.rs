//! Cluster-cardinality diversity weighting.
//!
//! The refined pool is clustered once over joint image+text embeddings.
//! Each sample's diversity factor is `(1 / (|C_x| + epsilon))^delta`:
//! members of rare clusters get factors near 1, members of huge clusters
//! get factors near 0, and `delta = 0` switches the weighting off. The
//! same assignment is reused by the feedback loop's cluster perturbations,
//! so it is kept as an explicit artifact rather than recomputed.

use serde::{Deserialize, Serialize};

use crate::corpus::{joint_embedding, EmbeddingBlock};
use crate::error::{Result, TadsError};
use crate::numeric::{default_cluster_count, kmeans_cluster, DenseMatrix, KMeansModel, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversityConfig {
    /// Cluster count; `None` picks one cluster per 500 samples in [8, 512].
    pub n_clusters: Option<usize>,
    /// Density sensitivity. 0 disables the weighting entirely.
    pub delta: f64,
    /// Additive smoothing on the cluster size.
    pub epsilon: f64,
    pub kmeans_batch_size: usize,
    pub kmeans_iters: usize,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            n_clusters: None,
            delta: 0.5,
            epsilon: 1.0,
            kmeans_batch_size: 256,
            kmeans_iters: 50,
        }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(TadsError::InvalidConfig(format!(
                "delta = {}, need a finite value >= 0",
                self.delta
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(TadsError::InvalidConfig(format!(
                "epsilon = {}, need a finite value > 0",
                self.epsilon
            )));
        }
        if self.kmeans_batch_size == 0 || self.kmeans_iters == 0 {
            return Err(TadsError::InvalidConfig(
                "kmeans batch size and iteration count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn clusters_for(&self, n: usize) -> Result<usize> {
        match self.n_clusters {
            Some(m) if m == 0 || m > n => Err(TadsError::InvalidConfig(format!(
                "n_clusters = {m} invalid for a pool of {n}"
            ))),
            Some(m) => Ok(m),
            None => Ok(default_cluster_count(n)),
        }
    }
}

/// Fitted clustering of the refined pool, positionally aligned with the
/// sample list it was built from.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub model: KMeansModel,
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl ClusterAssignment {
    pub fn from_labels(labels: Vec<usize>, n_clusters: usize, model: KMeansModel) -> Result<Self> {
        let mut sizes = vec![0usize; n_clusters];
        for (i, &l) in labels.iter().enumerate() {
            *sizes
                .get_mut(l)
                .ok_or_else(|| TadsError::Index(format!(
                    "sample {i} labeled {l}, only {n_clusters} clusters"
                )))? += 1;
        }
        Ok(ClusterAssignment { model, labels, sizes })
    }

    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_size(&self, i: usize) -> Result<usize> {
        let label = *self
            .labels
            .get(i)
            .ok_or_else(|| TadsError::Index(format!("sample {i} of {}", self.labels.len())))?;
        Ok(self.sizes[label])
    }

    /// Sample indices belonging to cluster `c`.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == c).then_some(i))
            .collect()
    }
}

/// Clusters the pool over joint embeddings. `indices` selects which
/// corpus rows participate; labels come back in the same order.
pub fn cluster_pool(
    block: &EmbeddingBlock,
    indices: &[usize],
    cfg: &DiversityConfig,
    stream: &RngStream,
) -> Result<ClusterAssignment> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(TadsError::DegenerateInput("cannot cluster an empty pool".into()));
    }
    let k = cfg.clusters_for(indices.len())?;
    let rows: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| joint_embedding(block, i))
        .collect::<Result<_>>()?;
    let points = DenseMatrix::from_rows(&rows)?;
    let (model, labels) = kmeans_cluster(
        &points,
        k,
        cfg.kmeans_batch_size.min(indices.len()),
        cfg.kmeans_iters,
        &stream.derive("diversity-kmeans"),
    )?;
    ClusterAssignment::from_labels(labels, k, model)
}

/// Factor for a cluster of the given size.
pub fn diversity_from_size(size: usize, delta: f64, epsilon: f64) -> f64 {
    (1.0 / (size as f64 + epsilon)).powf(delta)
}

/// Diversity factor of sample `i` under the fitted assignment.
pub fn diversity_factor(
    assignment: &ClusterAssignment,
    i: usize,
    cfg: &DiversityConfig,
) -> Result<f64> {
    Ok(diversity_from_size(assignment.cluster_size(i)?, cfg.delta, cfg.epsilon))
}

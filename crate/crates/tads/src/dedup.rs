//! Three-layer deduplication.
//!
//! * **Layer 1, metadata:** records sharing a content hash, and then records
//!   sharing a URL, collapse to the member with the best cheap prior score
//!   (resolution + caption length).
//! * **Layer 2, cluster quota:** survivors are clustered on their joint
//!   embeddings and each cluster keeps its top `ceil(gamma * |C|)` members
//!   by the same prior, trimming dense regions.
//! * **Layer 3, pairwise redundancy:** within each cluster, samples whose
//!   captions are within `tau_edit` edits or whose text embeddings exceed
//!   `tau_sem` cosine merge into connected components; each component keeps
//!   the member with the best image-text alignment.
//!
//! Ties always break toward the lexicographically smallest id, so the whole
//! pipeline is deterministic for a fixed stream.

use serde::{Deserialize, Serialize};

use crate::corpus::{alignment_score, joint_embedding, Corpus, EmbeddingBlock, SampleRecord};
use crate::error::{Result, TadsError};
use crate::numeric::{
    cosine_similarity, kmeans_cluster, levenshtein_below, DenseMatrix, RngStream,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DedupConfig {
    /// Weight on image pixel count in the prior score.
    pub alpha_r: f64,
    /// Weight on caption character count in the prior score.
    pub alpha_l: f64,
    /// Fraction of each cluster retained by the quota layer, in (0, 1].
    pub gamma: f64,
    /// Cluster count for the quota layer; `None` scales with pool size as
    /// `ceil(n / 500)` clamped into [8, 512].
    pub m_clusters: Option<usize>,
    /// Captions closer than this many edits are structural duplicates.
    pub tau_edit: usize,
    /// Text-embedding cosine above this is semantic duplication.
    pub tau_sem: f64,
    pub kmeans_batch_size: usize,
    pub kmeans_iters: usize,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            alpha_r: 1e-6,
            alpha_l: 0.01,
            gamma: 0.8,
            m_clusters: None,
            tau_edit: 5,
            tau_sem: 0.92,
            kmeans_batch_size: 256,
            kmeans_iters: 50,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TadsError::InvalidConfig(format!("gamma = {} outside (0, 1]", self.gamma)));
        }
        if self.tau_edit == 0 {
            return Err(TadsError::InvalidConfig("tau_edit must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau_sem) {
            return Err(TadsError::InvalidConfig(format!("tau_sem = {} outside [-1, 1]", self.tau_sem)));
        }
        if self.alpha_r < 0.0 || self.alpha_l < 0.0 {
            return Err(TadsError::InvalidConfig("prior weights must be non-negative".into()));
        }
        if let Some(m) = self.m_clusters {
            if m == 0 {
                return Err(TadsError::InvalidConfig("m_clusters must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Cluster count for a pool of `n` survivors.
    pub fn clusters_for(&self, n: usize) -> Result<usize> {
        match self.m_clusters {
            Some(m) if m > n => Err(TadsError::InvalidConfig(format!(
                "m_clusters = {m} exceeds pool size {n}"
            ))),
            Some(m) => Ok(m),
            None => Ok(crate::numeric::default_cluster_count(n)),
        }
    }
}

/// Cheap retention prior: `alpha_r * pixels + alpha_l * caption_chars`.
/// The resolution term is 0 when dimensions are unknown.
pub fn init_quality_score(rec: &SampleRecord, cfg: &DedupConfig) -> f64 {
    let resolution = rec.pixel_count().map_or(0.0, |p| p as f64);
    cfg.alpha_r * resolution + cfg.alpha_l * rec.caption.chars().count() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    ContentHash,
    Url,
    ClusterQuota,
    RedundantGroup,
}

/// One collapse event: which ids went away, which one they collapsed into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupGroup {
    pub layer: u8,
    pub reason: RemovalReason,
    pub retained: String,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub input_count: usize,
    pub layer1_removed: usize,
    pub layer2_removed: usize,
    pub layer3_removed: usize,
    pub survivor_count: usize,
    pub groups: Vec<DedupGroup>,
    /// Surviving ids in input order.
    pub survivors: Vec<String>,
}

/// Collapses exact metadata collisions: one pass grouping by content hash,
/// then an independent pass over the survivors grouping by URL. Returns
/// surviving indices (input order) and the collapse groups.
pub fn metadata_dedup(
    records: &[SampleRecord],
    indices: &[usize],
    cfg: &DedupConfig,
) -> (Vec<usize>, Vec<DedupGroup>) {
    let mut groups = Vec::new();
    let after_hash = collapse_by_key(
        records,
        indices,
        cfg,
        |r| r.content_hash.as_deref(),
        RemovalReason::ContentHash,
        &mut groups,
    );
    let after_url = collapse_by_key(
        records,
        &after_hash,
        cfg,
        |r| r.url.as_deref(),
        RemovalReason::Url,
        &mut groups,
    );
    (after_url, groups)
}

fn collapse_by_key<'a>(
    records: &'a [SampleRecord],
    indices: &[usize],
    cfg: &DedupConfig,
    key: impl Fn(&'a SampleRecord) -> Option<&'a str>,
    reason: RemovalReason,
    groups: &mut Vec<DedupGroup>,
) -> Vec<usize> {
    use std::collections::BTreeMap;
    let mut by_key: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        if let Some(k) = key(&records[i]) {
            by_key.entry(k).or_default().push(i);
        }
    }
    let mut removed: std::collections::HashSet<usize> = std::collections::HashSet::new();
    for members in by_key.values() {
        if members.len() < 2 {
            continue;
        }
        let &keep = members
            .iter()
            .max_by(|&&a, &&b| {
                init_quality_score(&records[a], cfg)
                    .total_cmp(&init_quality_score(&records[b], cfg))
                    .then_with(|| records[b].id.cmp(&records[a].id))
            })
            .expect("non-empty group");
        let gone: Vec<usize> = members.iter().copied().filter(|&i| i != keep).collect();
        groups.push(DedupGroup {
            layer: 1,
            reason,
            retained: records[keep].id.clone(),
            removed: gone.iter().map(|&i| records[i].id.clone()).collect(),
        });
        removed.extend(gone);
    }
    indices.iter().copied().filter(|i| !removed.contains(i)).collect()
}

/// Layer 2 output: the trimmed pool plus the clustering layer 3 reuses.
#[derive(Debug, Clone)]
pub struct SemanticDedup {
    pub kept: Vec<usize>,
    pub groups: Vec<DedupGroup>,
    /// Kept indices grouped by cluster; cluster ids index this vector.
    pub clusters: Vec<Vec<usize>>,
}

/// Clusters the pool on joint embeddings and keeps each cluster's top
/// `ceil(gamma * |C|)` members by prior score.
pub fn semantic_dedup(
    records: &[SampleRecord],
    indices: &[usize],
    block: &EmbeddingBlock,
    cfg: &DedupConfig,
    stream: &RngStream,
) -> Result<SemanticDedup> {
    if indices.is_empty() {
        return Ok(SemanticDedup { kept: Vec::new(), groups: Vec::new(), clusters: Vec::new() });
    }
    let m = cfg.clusters_for(indices.len())?;
    let rows: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| joint_embedding(block, records[i].embedding_index))
        .collect::<Result<_>>()?;
    let points = DenseMatrix::from_rows(&rows)?;
    let (_, assignment) = kmeans_cluster(
        &points,
        m,
        cfg.kmeans_batch_size.min(indices.len()),
        cfg.kmeans_iters,
        &stream.derive("kmeans"),
    )?;

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (pos, &cluster) in assignment.iter().enumerate() {
        clusters[cluster].push(indices[pos]);
    }

    let mut kept_set = std::collections::HashSet::new();
    let mut groups = Vec::new();
    let mut kept_clusters: Vec<Vec<usize>> = Vec::with_capacity(m);
    for members in &clusters {
        if members.is_empty() {
            kept_clusters.push(Vec::new());
            continue;
        }
        let quota = ((cfg.gamma * members.len() as f64).ceil() as usize).min(members.len());
        let mut ranked = members.clone();
        ranked.sort_by(|&a, &b| {
            init_quality_score(&records[b], cfg)
                .total_cmp(&init_quality_score(&records[a], cfg))
                .then_with(|| records[a].id.cmp(&records[b].id))
        });
        let (keep, drop) = ranked.split_at(quota);
        if !drop.is_empty() {
            groups.push(DedupGroup {
                layer: 2,
                reason: RemovalReason::ClusterQuota,
                retained: records[*keep.first().expect("quota >= 1")].id.clone(),
                removed: drop.iter().map(|&i| records[i].id.clone()).collect(),
            });
        }
        kept_set.extend(keep.iter().copied());
        let mut kept_members = keep.to_vec();
        kept_members.sort_unstable();
        kept_clusters.push(kept_members);
    }

    let kept: Vec<usize> = indices.iter().copied().filter(|i| kept_set.contains(i)).collect();
    Ok(SemanticDedup { kept, groups, clusters: kept_clusters })
}

/// True when two samples duplicate each other: captions within `tau_edit`
/// edits (strict) or text-embedding cosine above `tau_sem` (strict).
pub fn redundancy_indicator(
    a: &SampleRecord,
    b: &SampleRecord,
    block: &EmbeddingBlock,
    cfg: &DedupConfig,
) -> Result<bool> {
    if levenshtein_below(&a.caption, &b.caption, cfg.tau_edit).is_some() {
        return Ok(true);
    }
    let cos = cosine_similarity(
        block.text_row(a.embedding_index)?,
        block.text_row(b.embedding_index)?,
    )?;
    Ok(cos > cfg.tau_sem)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins to keep component labels stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Within each cluster, merges redundant pairs into connected components and
/// keeps the member with the best image-text alignment (ties to the smaller
/// id). Returns surviving indices in input order plus the collapse groups.
pub fn quality_guided_dedup(
    records: &[SampleRecord],
    clusters: &[Vec<usize>],
    block: &EmbeddingBlock,
    cfg: &DedupConfig,
) -> Result<(Vec<usize>, Vec<DedupGroup>)> {
    let mut removed = std::collections::HashSet::new();
    let mut groups = Vec::new();
    for members in clusters {
        if members.len() < 2 {
            continue;
        }
        let mut uf = UnionFind::new(members.len());
        for a in 0..members.len() {
            for b in (a + 1)..members.len() {
                if redundancy_indicator(&records[members[a]], &records[members[b]], block, cfg)? {
                    uf.union(a, b);
                }
            }
        }
        let mut components: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for pos in 0..members.len() {
            let root = uf.find(pos);
            components.entry(root).or_default().push(members[pos]);
        }
        for component in components.values() {
            if component.len() < 2 {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for &i in component {
                let align = alignment_score(block, records[i].embedding_index)?;
                let better = match best {
                    None => true,
                    Some((bi, ba)) => {
                        align > ba || (align == ba && records[i].id < records[bi].id)
                    }
                };
                if better {
                    best = Some((i, align));
                }
            }
            let (keep, _) = best.expect("component has members");
            let gone: Vec<usize> = component.iter().copied().filter(|&i| i != keep).collect();
            groups.push(DedupGroup {
                layer: 3,
                reason: RemovalReason::RedundantGroup,
                retained: records[keep].id.clone(),
                removed: gone.iter().map(|&i| records[i].id.clone()).collect(),
            });
            removed.extend(gone);
        }
    }
    let mut survivors: Vec<usize> = clusters
        .iter()
        .flatten()
        .copied()
        .filter(|i| !removed.contains(i))
        .collect();
    survivors.sort_unstable();
    Ok((survivors, groups))
}

/// Runs all three layers and assembles the report. Returns surviving ids in
/// input order alongside the report.
pub fn run_dedup_pipeline(
    corpus: &Corpus,
    cfg: &DedupConfig,
    stream: &RngStream,
) -> Result<(Vec<String>, DedupReport)> {
    cfg.validate()?;
    let records = &corpus.records;
    let all: Vec<usize> = (0..records.len()).collect();

    let (after_meta, mut groups) = metadata_dedup(records, &all, cfg);
    let layer1_removed = all.len() - after_meta.len();

    let semantic = semantic_dedup(records, &after_meta, &corpus.block, cfg, stream)?;
    let layer2_removed = after_meta.len() - semantic.kept.len();
    groups.extend(semantic.groups);

    let (survivor_indices, layer3_groups) =
        quality_guided_dedup(records, &semantic.clusters, &corpus.block, cfg)?;
    let layer3_removed = semantic.kept.len() - survivor_indices.len();
    groups.extend(layer3_groups);

    let survivors: Vec<String> = survivor_indices.iter().map(|&i| records[i].id.clone()).collect();
    let report = DedupReport {
        input_count: records.len(),
        layer1_removed,
        layer2_removed,
        layer3_removed,
        survivor_count: survivors.len(),
        groups,
        survivors: survivors.clone(),
    };
    Ok((survivors, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub tau_edit: usize,
    pub tau_sem: f64,
    pub removed: usize,
    pub removal_rate: f64,
}

/// Removal-vs-threshold curve for the pairwise layer: for every threshold
/// combination, how many samples layer 3 would remove on the given
/// clustering. Pair metrics are computed once and swept cheaply.
pub fn calibrate_thresholds(
    records: &[SampleRecord],
    clusters: &[Vec<usize>],
    block: &EmbeddingBlock,
    edit_values: &[usize],
    sem_values: &[f64],
) -> Result<Vec<CalibrationPoint>> {
    let pool: usize = clusters.iter().map(Vec::len).sum();
    let mut points = Vec::with_capacity(edit_values.len() * sem_values.len());
    for &tau_edit in edit_values {
        for &tau_sem in sem_values {
            let cfg = DedupConfig { tau_edit, tau_sem, ..DedupConfig::default() };
            let (kept, _) = quality_guided_dedup(records, clusters, block, &cfg)?;
            let removed = pool - kept.len();
            points.push(CalibrationPoint {
                tau_edit,
                tau_sem,
                removed,
                removal_rate: if pool == 0 { 0.0 } else { removed as f64 / pool as f64 },
            });
        }
    }
    Ok(points)
}

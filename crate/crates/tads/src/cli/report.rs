//! Human-readable run summary assembled from the stage artifacts.

use std::fmt::Write;

use crate::corpus::CorpusManifest;
use crate::dedup::DedupReport;

use super::manifest::RunManifest;
use super::stages::{
    ClustersFile, FdoHistoryFile, QualityScoresFile, RelevanceFile, SelectionFile,
};

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[allow(clippy::too_many_arguments)]
pub fn build_report(
    manifest: &RunManifest,
    corpus: &CorpusManifest,
    dedup: &DedupReport,
    quality: &QualityScoresFile,
    relevance: &RelevanceFile,
    clusters: &ClustersFile,
    history: &FdoHistoryFile,
    selection: &SelectionFile,
) -> String {
    let mut out = String::new();
    let line = "=".repeat(64);
    let _ = writeln!(out, "{line}");
    let _ = writeln!(out, "data curation run summary");
    let _ = writeln!(out, "engine {}  master seed {}", manifest.engine_version, manifest.master_seed);
    let _ = writeln!(out, "config sha256 {}", manifest.config_sha256);
    let _ = writeln!(out, "{line}");

    let _ = writeln!(out, "\ncorpus");
    let _ = writeln!(
        out,
        "  {} samples at dim {}  (id: {})",
        corpus.record_count, corpus.embedding_dim, corpus.corpus_id
    );
    let _ = writeln!(out, "  checksum {}", corpus.checksum);

    let _ = writeln!(out, "\ndeduplication");
    let _ = writeln!(out, "  input                 {:>8}", dedup.input_count);
    let _ = writeln!(out, "  metadata collisions   {:>8}", dedup.layer1_removed);
    let _ = writeln!(out, "  cluster quota         {:>8}", dedup.layer2_removed);
    let _ = writeln!(out, "  pairwise duplicates   {:>8}", dedup.layer3_removed);
    let _ = writeln!(out, "  refined pool          {:>8}", dedup.survivor_count);

    let _ = writeln!(out, "\nquality");
    let _ = writeln!(out, "  mean predicted score  {:.4}", mean(&quality.scores));
    let _ = writeln!(out, "  mean weak label       {:.4}", mean(&quality.weak_labels));
    if let (Some(first), Some(last)) =
        (quality.training_curve.first(), quality.training_curve.last())
    {
        let _ = writeln!(
            out,
            "  training objective    {first:.4} -> {last:.4} over {} epochs",
            quality.training_curve.len()
        );
    }

    let _ = writeln!(out, "\ntask relevance");
    let _ = writeln!(out, "  {} tasks: {}", relevance.task_ids.len(), relevance.task_ids.join(", "));

    let _ = writeln!(out, "\ndiversity clustering  ({} clusters)", clusters.sizes.len());
    let score_by_cluster = {
        let mut sums = vec![0.0; clusters.sizes.len()];
        let mut counts = vec![0usize; clusters.sizes.len()];
        for (&label, &score) in clusters.labels.iter().zip(&selection.scores) {
            sums[label] += score;
            counts[label] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect::<Vec<f64>>()
    };
    let _ = writeln!(out, "  cluster  size  diversity-weight  mean-value-score");
    for (c, &size) in clusters.sizes.iter().enumerate() {
        let factor = clusters
            .labels
            .iter()
            .position(|&l| l == c)
            .map_or(f64::NAN, |i| clusters.factors[i]);
        let _ = writeln!(
            out,
            "  {c:>7}  {size:>4}  {factor:>16.4}  {:>16.4}",
            score_by_cluster[c]
        );
    }

    let _ = writeln!(out, "\nvalue-network training  ({} meta-iterations)", history.reward_history.len());
    if !history.reward_history.is_empty() {
        let n = history.reward_history.len();
        let head = &history.reward_history[..n.min(10)];
        let tail = &history.reward_history[n.saturating_sub(10)..];
        let _ = writeln!(out, "  first reward {:.4}  last reward {:.4}", history.reward_history[0], history.reward_history[n - 1]);
        let _ = writeln!(out, "  mean first-10 {:.4}  mean last-10 {:.4}", mean(head), mean(tail));
        let curve: Vec<String> =
            history.reward_history.iter().map(|r| format!("{r:.4}")).collect();
        let _ = writeln!(out, "  reward curve: {}", curve.join(" "));
    }

    let _ = writeln!(out, "\nselection");
    let _ = writeln!(out, "  threshold             {:.4}", selection.threshold);
    let _ = writeln!(out, "  selected              {:>8}", selection.selected_ids.len());
    let _ = writeln!(out, "  of refined pool       {:>8}", selection.refined_size);
    let _ = writeln!(out, "  of raw pool           {:>8}", selection.pool_size);
    let _ = writeln!(out, "  selection ratio       {:>8.3}", selection.selection_ratio());

    let _ = writeln!(out, "\nartifacts");
    // The report cannot list itself without changing its own checksum.
    for (stage, record) in manifest.stages.iter().filter(|(s, _)| s.as_str() != "report") {
        for artifact in &record.outputs {
            let _ = writeln!(out, "  [{stage}] {}  sha256 {}", artifact.path, artifact.sha256);
        }
    }
    out
}

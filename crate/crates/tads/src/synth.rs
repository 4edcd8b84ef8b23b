//! Synthetic corpus generation with planted ground truth, plus an exact
//! enumeration oracle for expected subset rewards.
//!
//! Generated corpora have known cluster structure (orthogonal centers with
//! Gaussian spread), a controlled corrupt fraction (decorrelated image and
//! text embeddings, weak operator scores), and planted duplicate families
//! of three kinds: exact copies, captions within a few character edits,
//! and paraphrases whose text embedding stays within a tight cosine band
//! of the donor. Held-out members of each cluster become task validation
//! data, so every planted fact can be checked mechanically downstream.
//!
//! All output files are byte-identical for a fixed spec, including their
//! modification times, which are pinned to a seed-derived constant so that
//! manifests hashing file metadata reproduce exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_embedding_block, write_records, EmbeddingBlock, SampleRecord,
};
use crate::error::{Result, TadsError};
use crate::numeric::{dot, norm, DenseMatrix, RngStream};
use crate::relevance::{EvaluatorKind, TaskManifest, TaskManifestEntry};

/// Which clusters matter to one downstream task and how it is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBlueprint {
    pub task_id: String,
    pub relevant_clusters: Vec<usize>,
    pub evaluator_kind: EvaluatorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Total sample count, planted duplicates included.
    pub n: usize,
    pub dim: usize,
    pub n_clusters: usize,
    /// Gaussian noise scale around each cluster center.
    pub cluster_spread: f64,
    /// Relative cluster sizes; empty means uniform. Length must match
    /// `n_clusters` otherwise.
    pub cluster_weights: Vec<f64>,
    pub exact_duplicates: usize,
    pub near_text_duplicates: usize,
    pub paraphrase_duplicates: usize,
    /// Fraction of originals generated with decorrelated pairs and weak
    /// operator scores.
    pub corrupt_fraction: f64,
    pub tasks: Vec<TaskBlueprint>,
    /// Held-out validation pairs generated per relevant cluster per task.
    pub holdout_per_cluster: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 400,
            dim: 32,
            n_clusters: 8,
            cluster_spread: 0.12,
            cluster_weights: Vec::new(),
            exact_duplicates: 0,
            near_text_duplicates: 0,
            paraphrase_duplicates: 0,
            corrupt_fraction: 0.3,
            tasks: Vec::new(),
            holdout_per_cluster: 8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn total_duplicates(&self) -> usize {
        self.exact_duplicates + self.near_text_duplicates + self.paraphrase_duplicates
    }

    pub fn originals(&self) -> usize {
        self.n.saturating_sub(self.total_duplicates())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(TadsError::InvalidConfig("n must be positive".into()));
        }
        if self.n_clusters == 0 {
            return Err(TadsError::InvalidConfig("n_clusters must be positive".into()));
        }
        if self.dim < self.n_clusters {
            return Err(TadsError::InvalidConfig(format!(
                "dim = {} cannot hold {} orthogonal cluster centers",
                self.dim, self.n_clusters
            )));
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread > 0.0 && self.cluster_spread <= 1.0)
        {
            return Err(TadsError::InvalidConfig(format!(
                "cluster_spread = {}, need a value in (0, 1]",
                self.cluster_spread
            )));
        }
        if !self.cluster_weights.is_empty() {
            if self.cluster_weights.len() != self.n_clusters {
                return Err(TadsError::InvalidConfig(format!(
                    "{} cluster weights for {} clusters",
                    self.cluster_weights.len(),
                    self.n_clusters
                )));
            }
            if self.cluster_weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
                return Err(TadsError::InvalidConfig(
                    "cluster weights must be finite and > 0".into(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return Err(TadsError::InvalidConfig(format!(
                "corrupt_fraction = {}, need a value in [0, 1]",
                self.corrupt_fraction
            )));
        }
        let originals = self.originals();
        if originals < self.n_clusters.max(2) {
            return Err(TadsError::InvalidConfig(format!(
                "{} originals left after planting {} duplicates; need at least {}",
                originals,
                self.total_duplicates(),
                self.n_clusters.max(2)
            )));
        }
        let corrupt = (self.corrupt_fraction * originals as f64).round() as usize;
        if originals - corrupt < self.total_duplicates() {
            return Err(TadsError::InvalidConfig(format!(
                "only {} clean originals to donate {} duplicates",
                originals - corrupt,
                self.total_duplicates()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(TadsError::InvalidConfig(format!(
                    "task id {} appears twice",
                    t.task_id
                )));
            }
            if t.relevant_clusters.is_empty() {
                return Err(TadsError::InvalidConfig(format!(
                    "task {} has no relevant clusters",
                    t.task_id
                )));
            }
            if let Some(&bad) = t.relevant_clusters.iter().find(|&&c| c >= self.n_clusters) {
                return Err(TadsError::InvalidConfig(format!(
                    "task {} references cluster {bad}, only {} exist",
                    t.task_id, self.n_clusters
                )));
            }
        }
        if !self.tasks.is_empty() && self.holdout_per_cluster == 0 {
            return Err(TadsError::InvalidConfig(
                "holdout_per_cluster must be positive when tasks are declared".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicateKind {
    Exact,
    NearText,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub id: String,
    /// False for corrupt originals; planted duplicates inherit the donor's
    /// flag.
    pub clean: bool,
    pub cluster: usize,
    /// Shared by a donor and all of its planted copies.
    pub duplicate_group: Option<usize>,
    /// True only on planted copies, never on the donor.
    pub planted_duplicate: bool,
    pub duplicate_kind: Option<DuplicateKind>,
    /// One bit per task, in `task_ids` order.
    pub task_utility: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub task_ids: Vec<String>,
    pub samples: Vec<SampleTruth>,
}

impl GroundTruth {
    pub fn planted_count(&self) -> usize {
        self.samples.iter().filter(|s| s.planted_duplicate).count()
    }
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(truth).map_err(|e| TadsError::json("ground truth", e))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| TadsError::io(path, e))
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let bytes = std::fs::read(path).map_err(|e| TadsError::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| TadsError::json(format!("ground truth {}", path.display()), e))
}

/// Paths of everything one generation run wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub record_path: PathBuf,
    pub embedding_path: PathBuf,
    pub ground_truth_path: PathBuf,
    /// Present only when the spec declares tasks.
    pub task_manifest_path: Option<PathBuf>,
    pub ground_truth: GroundTruth,
}

const VOCAB: [&str; 48] = [
    "amber", "basalt", "canyon", "driftwood", "ember", "fjord", "granite", "harbor", "islet",
    "juniper", "kelp", "lagoon", "meadow", "nimbus", "orchard", "prairie", "quarry", "reef",
    "summit", "thicket", "upland", "valley", "willow", "xeric", "yonder", "zenith", "arcade",
    "bridge", "cistern", "dome", "esplanade", "facade", "gallery", "hangar", "jetty", "kiln",
    "lighthouse", "mill", "nave", "obelisk", "pavilion", "quay", "rotunda", "spire", "terrace",
    "vault", "wharf", "atrium",
];

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    for x in &mut v {
        *x /= n;
    }
    v
}

/// Mutually orthogonal unit centers via Gram-Schmidt on Gaussian draws.
fn cluster_centers(k: usize, dim: usize, stream: &RngStream) -> Result<Vec<Vec<f64>>> {
    let mut rng = stream.derive("centers").rng();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut accepted = None;
        for _attempt in 0..32 {
            let mut v = gaussian_vec(&mut rng, dim);
            for prev in &centers {
                let proj = dot(&v, prev);
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= proj * p;
                }
            }
            if norm(&v) > 1e-6 {
                accepted = Some(normalized(v));
                break;
            }
        }
        centers.push(accepted.ok_or_else(|| {
            TadsError::DegenerateInput(format!("could not orthogonalize center {c}"))
        })?);
    }
    Ok(centers)
}

fn point_near(center: &[f64], spread: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise = gaussian_vec(rng, center.len());
    normalized(center.iter().zip(&noise).map(|(c, n)| c + spread * n).collect())
}

/// Text embedding aligned with an image embedding at cosine around 0.98.
const ALIGN_NOISE: f64 = 0.2;

fn aligned_text(image: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let noise = gaussian_vec(rng, image.len());
    normalized(image.iter().zip(&noise).map(|(i, n)| i + ALIGN_NOISE * n).collect())
}

fn nonce(rng: &mut impl Rng) -> String {
    (0..8).map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap()).collect()
}

fn pick_words(rng: &mut impl Rng, count: usize) -> String {
    (0..count)
        .map(|_| VOCAB[rng.gen_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn hex_hash(rng: &mut impl Rng) -> String {
    let bytes: [u8; 32] = rng.gen();
    hex::encode(bytes)
}

fn operator_fields(clean: bool, rng: &mut impl Rng) -> BTreeMap<String, f64> {
    // (field, clean range, corrupt range); each present with probability 0.8.
    let specs: [(&str, (f64, f64), (f64, f64)); 7] = [
        ("blur_score", (0.6, 0.95), (0.05, 0.4)),
        ("ocr_region_ratio", (0.0, 0.2), (0.4, 0.9)),
        ("lang_confidence", (0.85, 1.0), (0.2, 0.6)),
        ("concreteness", (0.6, 0.95), (0.1, 0.4)),
        ("flipped_consistency", (0.7, 0.95), (0.1, 0.4)),
        ("grounding_box_count_norm", (0.5, 0.9), (0.05, 0.35)),
        ("grounding_confidence", (0.5, 0.9), (0.05, 0.35)),
    ];
    let mut out = BTreeMap::new();
    for (name, clean_range, corrupt_range) in specs {
        let present = rng.gen_bool(0.8);
        let (lo, hi) = if clean { clean_range } else { corrupt_range };
        let value = rng.gen_range(lo..hi);
        if present {
            out.insert(name.to_string(), value);
        }
    }
    out
}

struct Original {
    record: SampleRecord,
    image: Vec<f64>,
    text: Vec<f64>,
    clean: bool,
    cluster: usize,
}

fn make_original(
    i: usize,
    cluster: usize,
    clean: bool,
    centers: &[Vec<f64>],
    spec: &SynthSpec,
    stream: &RngStream,
) -> Original {
    let mut rng = stream.derive_indexed("sample", i as u64).rng();
    let image = point_near(&centers[cluster], spec.cluster_spread, &mut rng);
    let text = if clean {
        aligned_text(&image, &mut rng)
    } else {
        normalized(gaussian_vec(&mut rng, spec.dim))
    };
    let id = format!("s{i:06}");
    let caption = if clean {
        format!("{} scene near the {} {}", pick_words(&mut rng, 5), pick_words(&mut rng, 1), nonce(&mut rng))
    } else {
        format!("{} {}", pick_words(&mut rng, 1), nonce(&mut rng))
    };
    let (w, h) = if clean {
        (rng.gen_range(600..1600), rng.gen_range(600..1600))
    } else {
        (rng.gen_range(120..520), rng.gen_range(120..520))
    };
    let record = SampleRecord {
        id: id.clone(),
        url: Some(format!("https://synth.invalid/{id}")),
        content_hash: Some(hex_hash(&mut rng)),
        width_px: Some(w),
        height_px: Some(h),
        caption,
        ocr_text: None,
        embedding_index: i,
        ingested_operator_fields: operator_fields(clean, &mut rng),
    };
    Original { record, image, text, clean, cluster }
}

/// Replaces up to three characters of the donor caption with different
/// ones, keeping the edit distance in 1..=3.
fn mutate_caption(caption: &str, rng: &mut impl Rng) -> String {
    let mut chars: Vec<char> = caption.chars().collect();
    let edits = rng.gen_range(1..=3.min(chars.len()));
    let mut positions: Vec<usize> = (0..chars.len()).collect();
    positions.shuffle(rng);
    for &p in positions.iter().take(edits) {
        let old = chars[p];
        let replacement = loop {
            let c = char::from(rng.gen_range(b'a'..=b'z'));
            if c != old {
                break c;
            }
        };
        chars[p] = replacement;
    }
    chars.into_iter().collect()
}

/// Text embedding at an exact target cosine to the donor's, tilted so its
/// alignment with the donor image strictly drops. The copy is then never
/// preferred over the donor when a duplicate family keeps its best member.
fn paraphrase_text(donor_text: &[f64], donor_image: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let target: f64 = rng.gen_range(0.96..0.99);
    let magnitude = (1.0 / (target * target) - 1.0).sqrt();
    let mut e = gaussian_vec(rng, donor_text.len());
    let proj = dot(&e, donor_text);
    for (x, t) in e.iter_mut().zip(donor_text) {
        *x -= proj * t;
    }
    let e = normalized(e);
    if dot(&e, donor_image) > 0.0 {
        normalized(donor_text.iter().zip(&e).map(|(t, x)| t - magnitude * x).collect())
    } else {
        normalized(donor_text.iter().zip(&e).map(|(t, x)| t + magnitude * x).collect())
    }
}

/// Deterministic mtime for generated files so metadata-sensitive manifests
/// reproduce byte for byte across runs.
fn pinned_mtime(seed: u64) -> SystemTime {
    SystemTime::UNIX_EPOCH + Duration::from_secs(1_700_000_000 + seed % 1_000_000)
}

fn stamp_mtime(path: &Path, when: SystemTime) -> Result<()> {
    let file = std::fs::File::options()
        .write(true)
        .open(path)
        .map_err(|e| TadsError::io(path, e))?;
    file.set_modified(when).map_err(|e| TadsError::io(path, e))
}

fn write_holdout_block(
    path: &Path,
    clusters: &[usize],
    per_cluster: usize,
    centers: &[Vec<f64>],
    spread: f64,
    stream: &RngStream,
) -> Result<(Vec<usize>, usize)> {
    let mut images = Vec::new();
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for (class, &c) in clusters.iter().enumerate() {
        let mut rng = stream.derive_indexed("holdout", c as u64).rng();
        for _ in 0..per_cluster {
            let image = point_near(&centers[c], spread, &mut rng);
            let text = aligned_text(&image, &mut rng);
            images.push(image);
            texts.push(text);
            labels.push(class);
        }
    }
    let block = EmbeddingBlock::new(
        DenseMatrix::from_rows(&images)?,
        DenseMatrix::from_rows(&texts)?,
    )?;
    write_embedding_block(path, &block)?;
    Ok((labels, clusters.len()))
}

/// Generates the corpus, task data, and ground truth into `out_dir`.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| TadsError::io(out_dir, e))?;
    let stream = RngStream::new(spec.seed, "synth");
    let centers = cluster_centers(spec.n_clusters, spec.dim, &stream)?;

    let originals_n = spec.originals();
    let weights = if spec.cluster_weights.is_empty() {
        vec![1.0; spec.n_clusters]
    } else {
        spec.cluster_weights.clone()
    };
    let total_weight: f64 = weights.iter().sum();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total_weight;
            Some(*acc)
        })
        .collect();

    let mut cluster_rng = stream.derive("cluster-pick").rng();
    let clusters: Vec<usize> = (0..originals_n)
        .map(|_| {
            let u: f64 = cluster_rng.gen();
            cumulative.iter().position(|&c| u <= c).unwrap_or(spec.n_clusters - 1)
        })
        .collect();

    let corrupt_n = (spec.corrupt_fraction * originals_n as f64).round() as usize;
    let mut corrupt_order: Vec<usize> = (0..originals_n).collect();
    corrupt_order.shuffle(&mut stream.derive("corrupt-pick").rng());
    let corrupt: std::collections::BTreeSet<usize> =
        corrupt_order.into_iter().take(corrupt_n).collect();

    let mut originals: Vec<Original> = (0..originals_n)
        .map(|i| make_original(i, clusters[i], !corrupt.contains(&i), centers.as_slice(), spec, &stream))
        .collect();

    // Duplicate donors: distinct clean originals, in shuffled order.
    let mut clean_indices: Vec<usize> =
        (0..originals_n).filter(|i| originals[*i].clean).collect();
    clean_indices.shuffle(&mut stream.derive("dup-donors").rng());
    let kinds = std::iter::empty()
        .chain(std::iter::repeat(DuplicateKind::Exact).take(spec.exact_duplicates))
        .chain(std::iter::repeat(DuplicateKind::NearText).take(spec.near_text_duplicates))
        .chain(std::iter::repeat(DuplicateKind::Paraphrase).take(spec.paraphrase_duplicates));

    let mut records = Vec::with_capacity(spec.n);
    let mut image_rows = Vec::with_capacity(spec.n);
    let mut text_rows = Vec::with_capacity(spec.n);
    let mut truths = Vec::with_capacity(spec.n);
    let task_bit = |cluster: usize| -> Vec<bool> {
        spec.tasks
            .iter()
            .map(|t| t.relevant_clusters.contains(&cluster))
            .collect()
    };

    let mut donor_groups: BTreeMap<usize, usize> = BTreeMap::new();
    let mut planted = Vec::new();
    for (j, kind) in kinds.enumerate() {
        let donor_idx = clean_indices[j];
        let group = *donor_groups.entry(donor_idx).or_insert(donor_idx);
        let copy_pos = originals_n + j;
        let mut rng = stream.derive_indexed("duplicate", j as u64).rng();
        let donor = &originals[donor_idx];
        let id = format!("s{copy_pos:06}");
        let mut record = donor.record.clone();
        record.id = id.clone();
        record.embedding_index = copy_pos;
        let (image, text) = match kind {
            DuplicateKind::Exact => (donor.image.clone(), donor.text.clone()),
            DuplicateKind::NearText => {
                record.caption = mutate_caption(&donor.record.caption, &mut rng);
                record.url = Some(format!("https://synth.invalid/{id}"));
                record.content_hash = Some(hex_hash(&mut rng));
                (donor.image.clone(), donor.text.clone())
            }
            DuplicateKind::Paraphrase => {
                record.caption = format!(
                    "{} rendering of the {} {}",
                    pick_words(&mut rng, 4),
                    pick_words(&mut rng, 1),
                    nonce(&mut rng)
                );
                record.url = Some(format!("https://synth.invalid/{id}"));
                record.content_hash = Some(hex_hash(&mut rng));
                (donor.image.clone(), paraphrase_text(&donor.text, &donor.image, &mut rng))
            }
        };
        planted.push((record, image, text, donor.cluster, donor.clean, kind, group));
    }

    for original in originals.drain(..) {
        let group = donor_groups.get(&original.record.embedding_index).copied();
        truths.push(SampleTruth {
            id: original.record.id.clone(),
            clean: original.clean,
            cluster: original.cluster,
            duplicate_group: group,
            planted_duplicate: false,
            duplicate_kind: None,
            task_utility: task_bit(original.cluster),
        });
        records.push(original.record);
        image_rows.push(original.image);
        text_rows.push(original.text);
    }
    for (record, image, text, cluster, clean, kind, group) in planted {
        truths.push(SampleTruth {
            id: record.id.clone(),
            clean,
            cluster,
            duplicate_group: Some(group),
            planted_duplicate: true,
            duplicate_kind: Some(kind),
            task_utility: task_bit(cluster),
        });
        records.push(record);
        image_rows.push(image);
        text_rows.push(text);
    }

    let block = EmbeddingBlock::new(
        DenseMatrix::from_rows(&image_rows)?,
        DenseMatrix::from_rows(&text_rows)?,
    )?;

    let record_path = out_dir.join("records.jsonl");
    let embedding_path = out_dir.join("embeddings.tdsemb");
    let ground_truth_path = out_dir.join("ground_truth.json");
    write_records(&record_path, &records)?;
    write_embedding_block(&embedding_path, &block)?;

    let truth = GroundTruth {
        task_ids: spec.tasks.iter().map(|t| t.task_id.clone()).collect(),
        samples: truths,
    };
    write_ground_truth(&ground_truth_path, &truth)?;
    let mut written = vec![record_path.clone(), embedding_path.clone(), ground_truth_path.clone()];

    let task_manifest_path = if spec.tasks.is_empty() {
        None
    } else {
        let weight = 1.0 / spec.tasks.len() as f64;
        let mut entries = Vec::new();
        for task in &spec.tasks {
            let proto_name = format!("task_{}_prototypes.tdsemb", task.task_id);
            let proto_rows: Vec<Vec<f64>> = task
                .relevant_clusters
                .iter()
                .map(|&c| centers[c].clone())
                .collect();
            let protos = DenseMatrix::from_rows(&proto_rows)?;
            let proto_block = EmbeddingBlock::new(protos.clone(), protos)?;
            let proto_path = out_dir.join(&proto_name);
            write_embedding_block(&proto_path, &proto_block)?;
            written.push(proto_path);

            let val_name = format!("task_{}_validation.tdsemb", task.task_id);
            let val_path = out_dir.join(&val_name);
            let (labels, _) = write_holdout_block(
                &val_path,
                &task.relevant_clusters,
                spec.holdout_per_cluster,
                &centers,
                spec.cluster_spread,
                &stream.derive(&format!("task/{}", task.task_id)),
            )?;
            written.push(val_path);

            let labels_name = match task.evaluator_kind {
                EvaluatorKind::ZeroshotClassification => {
                    let name = format!("task_{}_labels.json", task.task_id);
                    let path = out_dir.join(&name);
                    let mut bytes = serde_json::to_vec(&labels)
                        .map_err(|e| TadsError::json("labels", e))?;
                    bytes.push(b'\n');
                    std::fs::write(&path, bytes).map_err(|e| TadsError::io(&path, e))?;
                    written.push(path);
                    Some(PathBuf::from(name))
                }
                EvaluatorKind::Retrieval => None,
            };
            entries.push(TaskManifestEntry {
                task_id: task.task_id.clone(),
                weight,
                evaluator_kind: task.evaluator_kind,
                prototype_path: PathBuf::from(proto_name),
                validation_path: Some(PathBuf::from(val_name)),
                labels_path: labels_name,
            });
        }
        let manifest_path = out_dir.join("tasks.json");
        crate::relevance::write_task_manifest(&manifest_path, &TaskManifest { tasks: entries })?;
        written.push(manifest_path.clone());
        Some(manifest_path)
    };

    let when = pinned_mtime(spec.seed);
    for path in &written {
        stamp_mtime(path, when)?;
    }

    Ok(SynthOutput {
        record_path,
        embedding_path,
        ground_truth_path,
        task_manifest_path,
        ground_truth: truth,
    })
}

/// Exact expectation of a mask reward under independent Bernoulli
/// inclusion, with exact partial derivatives in every probability. Sample
/// `i` corresponds to bit `i` of the mask. The enumeration is `O(2^n n)`,
/// capped at n = 20.
pub fn exact_expected_reward(
    probs: &[f64],
    reward: &dyn Fn(u32) -> f64,
) -> Result<(f64, Vec<f64>)> {
    let n = probs.len();
    if n == 0 || n > 20 {
        return Err(TadsError::InvalidConfig(format!(
            "exact enumeration supports 1..=20 samples, got {n}"
        )));
    }
    if let Some(&bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(TadsError::NumericalDomain(format!(
            "inclusion probability {bad} outside [0, 1]"
        )));
    }
    let mut expectation = 0.0;
    let mut partials = vec![0.0; n];
    let mut factors = vec![0.0; n];
    let mut prefix = vec![0.0; n + 1];
    let mut suffix = vec![0.0; n + 1];
    for mask in 0u32..(1 << n) {
        for i in 0..n {
            factors[i] = if mask & (1 << i) != 0 { probs[i] } else { 1.0 - probs[i] };
        }
        prefix[0] = 1.0;
        for i in 0..n {
            prefix[i + 1] = prefix[i] * factors[i];
        }
        suffix[n] = 1.0;
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] * factors[i];
        }
        let j = reward(mask);
        expectation += j * prefix[n];
        for i in 0..n {
            // d(product)/d(p_i) drops factor i and signs by the bit.
            let without = prefix[i] * suffix[i + 1];
            let sign = if mask & (1 << i) != 0 { 1.0 } else { -1.0 };
            partials[i] += j * sign * without;
        }
    }
    Ok((expectation, partials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ingest;
    use crate::numeric::{cosine_similarity, levenshtein};

    fn base_spec() -> SynthSpec {
        SynthSpec {
            n: 80,
            dim: 16,
            n_clusters: 4,
            corrupt_fraction: 0.25,
            seed: 42,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_outputs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            exact_duplicates: 3,
            near_text_duplicates: 3,
            paraphrase_duplicates: 3,
            tasks: vec![TaskBlueprint {
                task_id: "ret".into(),
                relevant_clusters: vec![0, 1],
                evaluator_kind: EvaluatorKind::Retrieval,
            }],
            ..base_spec()
        };
        let o1 = generate_corpus(&spec, d1.path()).unwrap();
        let o2 = generate_corpus(&spec, d2.path()).unwrap();
        for (a, b) in [
            (&o1.record_path, &o2.record_path),
            (&o1.embedding_path, &o2.embedding_path),
            (&o1.ground_truth_path, &o2.ground_truth_path),
        ] {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
            let ma = std::fs::metadata(a).unwrap().modified().unwrap();
            let mb = std::fs::metadata(b).unwrap().modified().unwrap();
            assert_eq!(ma, mb, "mtimes differ for {a:?}");
        }
        assert_eq!(o1.ground_truth, o2.ground_truth);
        // Different seed changes the bytes.
        let d3 = tempfile::tempdir().unwrap();
        let other = SynthSpec { seed: 43, ..spec };
        let o3 = generate_corpus(&other, d3.path()).unwrap();
        assert_ne!(
            std::fs::read(&o1.embedding_path).unwrap(),
            std::fs::read(&o3.embedding_path).unwrap()
        );
    }

    #[test]
    fn generated_corpus_ingests_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate_corpus(&base_spec(), dir.path()).unwrap();
        let corpus = ingest(&out.record_path, &out.embedding_path).unwrap();
        assert_eq!(corpus.records.len(), 80);
        assert_eq!(corpus.block.dim(), 16);
        assert_eq!(out.ground_truth.samples.len(), 80);
        // Ids align positionally with ground truth and embedding rows.
        for (rec, truth) in corpus.records.iter().zip(&out.ground_truth.samples) {
            assert_eq!(rec.id, truth.id);
        }
    }

    #[test]
    fn corruption_separates_alignment_and_operators() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { corrupt_fraction: 0.5, n: 120, ..base_spec() };
        let out = generate_corpus(&spec, dir.path()).unwrap();
        let corpus = ingest(&out.record_path, &out.embedding_path).unwrap();
        let mut clean_align = Vec::new();
        let mut corrupt_align = Vec::new();
        for (i, truth) in out.ground_truth.samples.iter().enumerate() {
            let a = crate::corpus::alignment_score(&corpus.block, i).unwrap();
            if truth.clean {
                clean_align.push(a);
            } else {
                corrupt_align.push(a);
            }
        }
        assert_eq!(corrupt_align.len(), 60);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&clean_align) > mean(&corrupt_align) + 0.5,
            "alignment means too close: clean {} corrupt {}",
            mean(&clean_align),
            mean(&corrupt_align)
        );
    }

    #[test]
    fn planted_duplicates_have_promised_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n: 100,
            exact_duplicates: 4,
            near_text_duplicates: 4,
            paraphrase_duplicates: 4,
            ..base_spec()
        };
        let out = generate_corpus(&spec, dir.path()).unwrap();
        let corpus = ingest(&out.record_path, &out.embedding_path).unwrap();
        assert_eq!(out.ground_truth.planted_count(), 12);

        let by_id: BTreeMap<&str, usize> = corpus
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        for truth in &out.ground_truth.samples {
            let Some(kind) = truth.duplicate_kind else { continue };
            let copy = &corpus.records[by_id[truth.id.as_str()]];
            let donor_truth = out
                .ground_truth
                .samples
                .iter()
                .find(|s| {
                    s.duplicate_group == truth.duplicate_group && !s.planted_duplicate
                })
                .expect("donor present");
            let donor = &corpus.records[by_id[donor_truth.id.as_str()]];
            let donor_text = corpus.block.text_row(donor.embedding_index).unwrap();
            let copy_text = corpus.block.text_row(copy.embedding_index).unwrap();
            let donor_image = corpus.block.image_row(donor.embedding_index).unwrap();
            match kind {
                DuplicateKind::Exact => {
                    assert_eq!(copy.content_hash, donor.content_hash);
                    assert_eq!(copy.caption, donor.caption);
                    assert_eq!(copy_text, donor_text);
                }
                DuplicateKind::NearText => {
                    let d = levenshtein(&copy.caption, &donor.caption);
                    assert!((1..=3).contains(&d), "edit distance {d}");
                    assert_ne!(copy.content_hash, donor.content_hash);
                }
                DuplicateKind::Paraphrase => {
                    let cos = cosine_similarity(copy_text, donor_text).unwrap();
                    assert!((0.955..0.995).contains(&cos), "paraphrase cosine {cos}");
                    let donor_a = cosine_similarity(donor_image, donor_text).unwrap();
                    let copy_a = cosine_similarity(donor_image, copy_text).unwrap();
                    assert!(copy_a < donor_a, "copy outranks donor: {copy_a} vs {donor_a}");
                }
            }
        }
    }

    #[test]
    fn task_files_load_and_stay_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            tasks: vec![
                TaskBlueprint {
                    task_id: "zs".into(),
                    relevant_clusters: vec![0, 1],
                    evaluator_kind: EvaluatorKind::ZeroshotClassification,
                },
                TaskBlueprint {
                    task_id: "ret".into(),
                    relevant_clusters: vec![2],
                    evaluator_kind: EvaluatorKind::Retrieval,
                },
            ],
            holdout_per_cluster: 5,
            ..base_spec()
        };
        let out = generate_corpus(&spec, dir.path()).unwrap();
        let mpath = out.task_manifest_path.clone().unwrap();
        let supports = crate::relevance::load_task_supports(&mpath).unwrap();
        assert_eq!(supports.len(), 2);
        assert_eq!(supports[0].prototypes.rows(), 2);
        assert_eq!(supports[1].prototypes.rows(), 1);
        assert!((supports[0].weight - 0.5).abs() < 1e-12);

        let manifest = crate::relevance::read_task_manifest(&mpath).unwrap();
        let evaluators = crate::proxy::load_evaluators(&mpath, &manifest).unwrap();
        assert_eq!(evaluators.len(), 2);
        match &evaluators[0].data {
            crate::proxy::EvaluatorData::ZeroshotClassification { validation_images, labels, .. } => {
                assert_eq!(validation_images.rows(), 10);
                assert_eq!(labels.len(), 10);
            }
            other => panic!("expected zeroshot data, got {other:?}"),
        }

        // Per-task utility bits follow cluster membership.
        for truth in &out.ground_truth.samples {
            assert_eq!(truth.task_utility.len(), 2);
            assert_eq!(truth.task_utility[0], [0usize, 1].contains(&truth.cluster));
            assert_eq!(truth.task_utility[1], truth.cluster == 2);
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        assert!(SynthSpec { n: 0, ..base_spec() }.validate().is_err());
        assert!(SynthSpec { dim: 2, n_clusters: 4, ..base_spec() }.validate().is_err());
        assert!(SynthSpec { corrupt_fraction: 1.5, ..base_spec() }.validate().is_err());
        assert!(SynthSpec { exact_duplicates: 100, ..base_spec() }.validate().is_err());
        assert!(
            SynthSpec { cluster_weights: vec![1.0, 2.0], ..base_spec() }.validate().is_err()
        );
        let bad_task = SynthSpec {
            tasks: vec![TaskBlueprint {
                task_id: "t".into(),
                relevant_clusters: vec![9],
                evaluator_kind: EvaluatorKind::Retrieval,
            }],
            ..base_spec()
        };
        assert!(bad_task.validate().is_err());
        // Heavy corruption leaves too few clean donors.
        let starved = SynthSpec {
            n: 30,
            corrupt_fraction: 0.9,
            exact_duplicates: 10,
            ..base_spec()
        };
        assert!(starved.validate().is_err());
    }

    #[test]
    fn skewed_weights_produce_skewed_clusters() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n: 400,
            cluster_weights: vec![20.0, 5.0, 2.0, 1.0],
            corrupt_fraction: 0.0,
            ..base_spec()
        };
        let out = generate_corpus(&spec, dir.path()).unwrap();
        let mut sizes = [0usize; 4];
        for s in &out.ground_truth.samples {
            sizes[s.cluster] += 1;
        }
        assert!(sizes[0] > sizes[3] * 5, "sizes {sizes:?} not skewed");
    }

    #[test]
    fn single_bit_reward_expectation() {
        let v = [0.3, 0.8, 0.5];
        let (e, partials) = exact_expected_reward(&v, &|m| f64::from(m & 1)).unwrap();
        assert!((e - 0.3).abs() < 1e-15);
        assert!((partials[0] - 1.0).abs() < 1e-12);
        assert!(partials[1].abs() < 1e-12);
        assert!(partials[2].abs() < 1e-12);
    }

    #[test]
    fn popcount_reward_is_sum_of_probs() {
        let v = [0.3; 4];
        let (e, partials) = exact_expected_reward(&v, &|m| f64::from(m.count_ones())).unwrap();
        assert!((e - 1.2).abs() < 1e-12);
        for p in partials {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn additive_reward_matches_closed_form() {
        let v = [0.15, 0.4, 0.9, 0.62, 0.08];
        let c = [2.0, -1.0, 0.5, 3.0, -0.25];
        let reward = |m: u32| -> f64 {
            (0..5).map(|i| if m & (1 << i) != 0 { c[i] } else { 0.0 }).sum()
        };
        let (e, partials) = exact_expected_reward(&v, &reward).unwrap();
        let closed: f64 = v.iter().zip(&c).map(|(p, w)| p * w).sum();
        assert!((e - closed).abs() < 1e-12);
        for (p, w) in partials.iter().zip(&c) {
            assert!((p - w).abs() < 1e-12);
        }
    }

    #[test]
    fn partials_match_finite_differences_on_random_table() {
        let n = 10;
        let mut rng = RngStream::new(5, "oracle").rng();
        let table: Vec<f64> = (0..(1u32 << n)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let reward = |m: u32| table[m as usize];
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let (_, partials) = exact_expected_reward(&v, &reward).unwrap();
        let h = 1e-5;
        for i in 0..n {
            let mut plus = v.clone();
            plus[i] += h;
            let mut minus = v.clone();
            minus[i] -= h;
            let (ep, _) = exact_expected_reward(&plus, &reward).unwrap();
            let (em, _) = exact_expected_reward(&minus, &reward).unwrap();
            let fd = (ep - em) / (2.0 * h);
            assert!(
                (fd - partials[i]).abs() < 1e-8,
                "partial {i}: analytic {} vs fd {fd}",
                partials[i]
            );
        }
    }

    #[test]
    fn oracle_size_limits() {
        assert!(exact_expected_reward(&[], &|_| 0.0).is_err());
        let too_big = vec![0.5; 21];
        assert!(exact_expected_reward(&too_big, &|_| 0.0).is_err());
        assert!(exact_expected_reward(&[1.5], &|_| 0.0).is_err());
    }
}

//! Corpus ingestion and validation.
//!
//! A corpus is a pair of files: a JSONL record file (one [`SampleRecord`]
//! per line) and a binary embedding block holding unit-normalized image and
//! text embeddings for every record. [`ingest`] loads both, cross-validates
//! them, and produces a checksummed [`CorpusManifest`].

mod embfile;
mod records;

pub use embfile::{read_embedding_block, read_text_block, write_embedding_block, EMBEDDING_MAGIC};
pub use records::{read_records, write_records};

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TadsError};
use crate::numeric::{cosine_similarity, norm, DenseMatrix};

/// Relative slack allowed on embedding row norms; covers f32 storage
/// round-off on top of upstream normalization error.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// One corpus entry. Image pixels and operator outputs are never stored
/// here, only their scalar summaries; the heavy modality data lives in the
/// embedding block, linked by `embedding_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Hex-encoded 256-bit content hash of the source image, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_px: Option<u32>,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_text: Option<String>,
    /// Row of this sample in the embedding block.
    pub embedding_index: usize,
    /// Scalar perception-operator outputs in [0, 1], keyed by field name.
    /// Missing keys are imputed downstream.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ingested_operator_fields: BTreeMap<String, f64>,
}

impl SampleRecord {
    pub fn pixel_count(&self) -> Option<u64> {
        match (self.width_px, self.height_px) {
            (Some(w), Some(h)) => Some(u64::from(w) * u64::from(h)),
            _ => None,
        }
    }
}

/// Paired image/text embeddings for a corpus, held in 64-bit for math and
/// serialized in 32-bit. Every row is unit-norm within [`NORM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    image: DenseMatrix,
    text: DenseMatrix,
}

impl EmbeddingBlock {
    pub fn new(image: DenseMatrix, text: DenseMatrix) -> Result<Self> {
        if image.rows() != text.rows() || image.cols() != text.cols() {
            return Err(TadsError::Shape(format!(
                "image block is {}x{}, text block is {}x{}",
                image.rows(),
                image.cols(),
                text.rows(),
                text.cols()
            )));
        }
        validate_unit_rows(&image, "image")?;
        validate_unit_rows(&text, "text")?;
        Ok(EmbeddingBlock { image, text })
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.image.cols()
    }

    pub fn image(&self) -> &DenseMatrix {
        &self.image
    }

    pub fn text(&self) -> &DenseMatrix {
        &self.text
    }

    pub fn image_row(&self, i: usize) -> Result<&[f64]> {
        self.image.try_row(i)
    }

    pub fn text_row(&self, i: usize) -> Result<&[f64]> {
        self.text.try_row(i)
    }
}

fn validate_unit_rows(m: &DenseMatrix, which: &str) -> Result<()> {
    for (i, row) in m.iter_rows().enumerate() {
        let n = norm(row);
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(TadsError::Norm(format!(
                "{which} embedding row {i} has norm {n:.6}, expected 1 within {NORM_TOLERANCE}"
            )));
        }
    }
    Ok(())
}

/// Concatenated `[image; text]` embedding for sample `i`, length `2 * dim`.
pub fn joint_embedding(block: &EmbeddingBlock, i: usize) -> Result<Vec<f64>> {
    let mut joint = Vec::with_capacity(2 * block.dim());
    joint.extend_from_slice(block.image_row(i)?);
    joint.extend_from_slice(block.text_row(i)?);
    Ok(joint)
}

/// Cosine similarity between sample `i`'s image and text embeddings.
pub fn alignment_score(block: &EmbeddingBlock, i: usize) -> Result<f64> {
    cosine_similarity(block.image_row(i)?, block.text_row(i)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub sha256: String,
}

/// Identity card for an ingested corpus: what was read, how much of it, and
/// checksums to detect drift between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub record_count: usize,
    pub embedding_dim: usize,
    pub source_paths: Vec<SourceFile>,
    /// Digest over the per-file digests, in `source_paths` order.
    pub checksum: String,
    /// Unix seconds. Ingest stamps the record file's mtime so re-ingesting
    /// unchanged files reproduces the manifest byte for byte; generated
    /// corpora stamp a seed-derived value.
    pub created_at: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::Digest;
    let bytes = std::fs::read(path).map_err(|e| TadsError::io(path, e))?;
    let mut hasher = sha2::Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

pub fn combine_checksums(per_file: &[SourceFile]) -> String {
    use sha2::Digest;
    let mut hasher = sha2::Sha256::new();
    for f in per_file {
        hasher.update(f.sha256.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Loaded and validated corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<SampleRecord>,
    pub block: EmbeddingBlock,
    pub manifest: CorpusManifest,
}

/// Reads and cross-validates a record file and its embedding block.
///
/// Rejects duplicate ids, out-of-range embedding indices, malformed content
/// hashes, zero image dimensions, operator fields outside [0, 1], count
/// mismatches between the two files, and off-norm embedding rows.
pub fn ingest(record_path: &Path, embedding_path: &Path) -> Result<Corpus> {
    let records = read_records(record_path)?;
    let block = read_embedding_block(embedding_path)?;
    if records.len() != block.len() {
        return Err(TadsError::CorpusMismatch(format!(
            "{} records but {} embedding rows",
            records.len(),
            block.len()
        )));
    }
    let mut seen = HashSet::with_capacity(records.len());
    for (lineno, rec) in records.iter().enumerate() {
        let line = lineno + 1;
        if !seen.insert(rec.id.as_str()) {
            return Err(TadsError::Parse {
                line,
                message: format!("duplicate record id '{}'", rec.id),
            });
        }
        if rec.embedding_index >= block.len() {
            return Err(TadsError::Index(format!(
                "record '{}' points at embedding row {} of {}",
                rec.id,
                rec.embedding_index,
                block.len()
            )));
        }
        if let Some(hash) = &rec.content_hash {
            if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(TadsError::Parse {
                    line,
                    message: format!("record '{}': content_hash is not 64 hex chars", rec.id),
                });
            }
        }
        for (field, dim) in [("width_px", rec.width_px), ("height_px", rec.height_px)] {
            if dim == Some(0) {
                return Err(TadsError::Parse {
                    line,
                    message: format!("record '{}': {field} must be >= 1 when present", rec.id),
                });
            }
        }
        for (name, value) in &rec.ingested_operator_fields {
            if !(0.0..=1.0).contains(value) {
                return Err(TadsError::Parse {
                    line,
                    message: format!(
                        "record '{}': operator field '{name}' = {value} outside [0, 1]",
                        rec.id
                    ),
                });
            }
        }
    }

    let sources = vec![
        SourceFile { path: record_path.display().to_string(), sha256: sha256_file(record_path)? },
        SourceFile { path: embedding_path.display().to_string(), sha256: sha256_file(embedding_path)? },
    ];
    let checksum = combine_checksums(&sources);
    let created_at = std::fs::metadata(record_path)
        .and_then(|m| m.modified())
        .ok()
        .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_secs());
    let corpus_id = record_path
        .file_stem()
        .map_or_else(|| "corpus".to_string(), |s| s.to_string_lossy().into_owned());

    let manifest = CorpusManifest {
        corpus_id,
        record_count: records.len(),
        embedding_dim: block.dim(),
        source_paths: sources,
        checksum,
        created_at,
    };
    Ok(Corpus { records, block, manifest })
}

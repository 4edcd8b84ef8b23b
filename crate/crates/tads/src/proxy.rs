//! Lightweight two-tower proxy used to measure how useful a sampled subset
//! is for the downstream tasks.
//!
//! Each tower is a single linear projection over the precomputed
//! embeddings, trained with a symmetric InfoNCE objective: cosine logits
//! between projected image and text vectors, scaled by an inverse
//! temperature, with cross-entropy pulled toward the matched diagonal in
//! both directions. Every feedback evaluation resets the towers to their
//! initial snapshot so subsets are compared from the same starting point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::read_embedding_block;
use crate::error::{Result, TadsError};
use crate::numeric::{dot, norm, AdamState, DenseMatrix, RngStream};
use crate::relevance::{resolve_manifest_path, EvaluatorKind, TaskManifest, TaskManifestEntry};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    /// Output dimension of both projection heads.
    pub projection_dim: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            projection_dim: 64,
            temperature: 0.07,
            learning_rate: 5e-5,
            epochs: 10,
            batch_size: 256,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projection_dim == 0 {
            return Err(TadsError::InvalidConfig("projection_dim must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(TadsError::InvalidConfig(format!(
                "temperature = {}, need a finite value > 0",
                self.temperature
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TadsError::InvalidConfig(format!(
                "learning_rate = {}, need a finite value >= 0",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(TadsError::InvalidConfig(
                "epochs must be positive and batch_size at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProxyModel {
    pub image_head: DenseMatrix,
    pub text_head: DenseMatrix,
    pub config: ProxyConfig,
    init_image: DenseMatrix,
    init_text: DenseMatrix,
}

impl ProxyModel {
    /// Fresh towers with Xavier-uniform entries; the snapshot for later
    /// resets is taken immediately.
    pub fn seeded(embedding_dim: usize, cfg: &ProxyConfig, stream: &RngStream) -> Result<Self> {
        cfg.validate()?;
        if embedding_dim == 0 {
            return Err(TadsError::InvalidConfig("embedding_dim must be positive".into()));
        }
        let p = cfg.projection_dim;
        let bound = (6.0 / (p + embedding_dim) as f64).sqrt();
        let make = |purpose: &str| -> Result<DenseMatrix> {
            let mut rng = stream.derive(purpose).rng();
            let data: Vec<f64> = (0..p * embedding_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            DenseMatrix::new(p, embedding_dim, data)
        };
        let image_head = make("image-head")?;
        let text_head = make("text-head")?;
        Ok(ProxyModel {
            init_image: image_head.clone(),
            init_text: text_head.clone(),
            image_head,
            text_head,
            config: cfg.clone(),
        })
    }

    /// Restores both towers to their initial snapshot.
    pub fn reset(&mut self) {
        self.image_head = self.init_image.clone();
        self.text_head = self.init_text.clone();
    }

    pub fn embedding_dim(&self) -> usize {
        self.image_head.cols()
    }

    /// Projects one embedding through a tower and re-normalizes.
    fn project(head: &DenseMatrix, emb: &[f64]) -> Result<Vec<f64>> {
        let mut y = head.matvec(emb)?;
        let n = norm(&y);
        if n == 0.0 {
            return Err(TadsError::NumericalDomain(
                "projected embedding collapsed to the zero vector".into(),
            ));
        }
        for v in &mut y {
            *v /= n;
        }
        Ok(y)
    }

    pub fn project_image(&self, emb: &[f64]) -> Result<Vec<f64>> {
        Self::project(&self.image_head, emb)
    }

    pub fn project_text(&self, emb: &[f64]) -> Result<Vec<f64>> {
        Self::project(&self.text_head, emb)
    }

    fn project_rows(head: &DenseMatrix, rows: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = Vec::with_capacity(rows.rows() * head.rows());
        for row in rows.iter_rows() {
            out.extend(Self::project(head, row)?);
        }
        DenseMatrix::new(rows.rows(), head.rows(), out)
    }
}

fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Symmetric cross-entropy on an explicit logit matrix: mean of the
/// image-to-text direction (softmax over rows, target on the diagonal) and
/// the text-to-image direction (softmax over columns).
pub fn info_nce_from_logits(logits: &DenseMatrix) -> Result<f64> {
    let b = logits.rows();
    if b != logits.cols() {
        return Err(TadsError::Shape(format!(
            "logit matrix is {b}x{}, need square",
            logits.cols()
        )));
    }
    if b < 2 {
        return Err(TadsError::DegenerateInput(
            "contrastive loss needs a batch of at least 2 pairs".into(),
        ));
    }
    let mut row_loss = 0.0;
    let mut col_loss = 0.0;
    for i in 0..b {
        row_loss += logsumexp(logits.row(i)) - logits.row(i)[i];
        let col: Vec<f64> = (0..b).map(|r| logits.row(r)[i]).collect();
        col_loss += logsumexp(&col) - col[i];
    }
    Ok(0.5 * (row_loss + col_loss) / b as f64)
}

fn logit_matrix(proxy: &ProxyModel, images: &DenseMatrix, texts: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    if images.rows() != texts.rows() {
        return Err(TadsError::Shape(format!(
            "{} image rows vs {} text rows",
            images.rows(),
            texts.rows()
        )));
    }
    let u = ProxyModel::project_rows(&proxy.image_head, images)?;
    let t = ProxyModel::project_rows(&proxy.text_head, texts)?;
    let b = u.rows();
    let mut logits = DenseMatrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            logits.row_mut(i)[j] = dot(u.row(i), t.row(j)) / proxy.config.temperature;
        }
    }
    Ok((logits, u, t))
}

/// Contrastive loss of the proxy on a batch of paired embeddings.
pub fn info_nce_loss(proxy: &ProxyModel, images: &DenseMatrix, texts: &DenseMatrix) -> Result<f64> {
    let (logits, _, _) = logit_matrix(proxy, images, texts)?;
    info_nce_from_logits(&logits)
}

/// Loss plus analytic gradients with respect to both tower matrices.
pub fn info_nce_gradients(
    proxy: &ProxyModel,
    images: &DenseMatrix,
    texts: &DenseMatrix,
) -> Result<(f64, DenseMatrix, DenseMatrix)> {
    let (logits, u, t) = logit_matrix(proxy, images, texts)?;
    let loss = info_nce_from_logits(&logits)?;
    let b = logits.rows();
    let p = u.cols();

    // d(loss)/d(logit_ij): average of row-softmax and column-softmax terms.
    let mut dlogits = DenseMatrix::zeros(b, b);
    for i in 0..b {
        let lse = logsumexp(logits.row(i));
        for j in 0..b {
            let pij = (logits.row(i)[j] - lse).exp();
            dlogits.row_mut(i)[j] += 0.5 * (pij - f64::from(u8::from(i == j))) / b as f64;
        }
    }
    for j in 0..b {
        let col: Vec<f64> = (0..b).map(|r| logits.row(r)[j]).collect();
        let lse = logsumexp(&col);
        for i in 0..b {
            let qij = (col[i] - lse).exp();
            dlogits.row_mut(i)[j] += 0.5 * (qij - f64::from(u8::from(i == j))) / b as f64;
        }
    }

    // Chain through the cosine logits into the unit projections.
    let mut du = DenseMatrix::zeros(b, p);
    let mut dt = DenseMatrix::zeros(b, p);
    let inv_temp = 1.0 / proxy.config.temperature;
    for i in 0..b {
        for j in 0..b {
            let w = dlogits.row(i)[j] * inv_temp;
            for c in 0..p {
                du.row_mut(i)[c] += w * t.row(j)[c];
                dt.row_mut(j)[c] += w * u.row(i)[c];
            }
        }
    }

    // Through normalization (y -> y/|y|) and the linear head.
    let back_tower = |head: &DenseMatrix,
                      inputs: &DenseMatrix,
                      units: &DenseMatrix,
                      dunits: &DenseMatrix|
     -> Result<DenseMatrix> {
        let mut dhead = DenseMatrix::zeros(head.rows(), head.cols());
        for i in 0..inputs.rows() {
            let y_norm = norm(&head.matvec(inputs.row(i))?);
            let g = dunits.row(i);
            let ui = units.row(i);
            let radial = dot(g, ui);
            for r in 0..head.rows() {
                let dy = (g[r] - radial * ui[r]) / y_norm;
                for (dh, x) in dhead.row_mut(r).iter_mut().zip(inputs.row(i)) {
                    *dh += dy * x;
                }
            }
        }
        Ok(dhead)
    };
    let d_image = back_tower(&proxy.image_head, images, &u, &du)?;
    let d_text = back_tower(&proxy.text_head, texts, &t, &dt)?;
    Ok((loss, d_image, d_text))
}

/// Resets the proxy to its snapshot and adapts it on the subset pairs with
/// mini-batch Adam. Returns the mean loss per epoch. Trailing batches with
/// fewer than 2 pairs are folded into the previous batch.
pub fn train_proxy(
    proxy: &mut ProxyModel,
    images: &DenseMatrix,
    texts: &DenseMatrix,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    if images.rows() != texts.rows() {
        return Err(TadsError::Shape(format!(
            "{} image rows vs {} text rows",
            images.rows(),
            texts.rows()
        )));
    }
    if images.rows() == 0 {
        return Err(TadsError::EmptySubset);
    }
    if images.rows() < 2 {
        return Err(TadsError::DegenerateInput(
            "proxy adaptation needs at least 2 pairs".into(),
        ));
    }
    proxy.reset();
    let cfg = proxy.config.clone();
    let n = images.rows();
    let p = cfg.projection_dim;
    let d = proxy.embedding_dim();
    let head_len = p * d;
    let mut adam = AdamState::new(2 * head_len, cfg.learning_rate);
    let mut rng = stream.derive("batches").rng();
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        let mut start = 0;
        while start < n {
            let mut end = (start + cfg.batch_size).min(n);
            if n - end == 1 {
                end = n;
            }
            let idx = &order[start..end];
            let bi = images.gather_rows(idx)?;
            let bt = texts.gather_rows(idx)?;
            let (loss, d_img, d_txt) = info_nce_gradients(proxy, &bi, &bt)?;
            epoch_loss += loss;
            batches += 1.0;

            let mut flat = Vec::with_capacity(2 * head_len);
            flat.extend_from_slice(proxy.image_head.as_slice());
            flat.extend_from_slice(proxy.text_head.as_slice());
            let mut grad = Vec::with_capacity(2 * head_len);
            grad.extend_from_slice(d_img.as_slice());
            grad.extend_from_slice(d_txt.as_slice());
            adam.step(&mut flat, &grad)?;
            proxy.image_head = DenseMatrix::new(p, d, flat[..head_len].to_vec())?;
            proxy.text_head = DenseMatrix::new(p, d, flat[head_len..].to_vec())?;
            start = end;
        }
        curve.push(epoch_loss / batches);
    }
    Ok(curve)
}

/// Held-out scoring data for one task.
#[derive(Debug, Clone)]
pub enum EvaluatorData {
    /// Validation images classified against class prototype texts.
    ZeroshotClassification {
        validation_images: DenseMatrix,
        class_prototypes: DenseMatrix,
        labels: Vec<usize>,
    },
    /// Paired validation embeddings scored by recall@1 in both directions.
    Retrieval {
        validation_images: DenseMatrix,
        validation_texts: DenseMatrix,
    },
}

#[derive(Debug, Clone)]
pub struct TaskEvaluator {
    pub task_id: String,
    pub weight: f64,
    pub data: EvaluatorData,
}

impl TaskEvaluator {
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            EvaluatorData::ZeroshotClassification { validation_images, class_prototypes, labels } => {
                if validation_images.rows() == 0 {
                    return Err(TadsError::InvalidConfig(format!(
                        "task {} has an empty validation set",
                        self.task_id
                    )));
                }
                if labels.len() != validation_images.rows() {
                    return Err(TadsError::Shape(format!(
                        "task {}: {} labels for {} validation items",
                        self.task_id,
                        labels.len(),
                        validation_images.rows()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= class_prototypes.rows()) {
                    return Err(TadsError::Index(format!(
                        "task {}: label {bad} with only {} classes",
                        self.task_id,
                        class_prototypes.rows()
                    )));
                }
                Ok(())
            }
            EvaluatorData::Retrieval { validation_images, validation_texts } => {
                if validation_images.rows() == 0 {
                    return Err(TadsError::InvalidConfig(format!(
                        "task {} has an empty validation set",
                        self.task_id
                    )));
                }
                if validation_images.rows() != validation_texts.rows() {
                    return Err(TadsError::Shape(format!(
                        "task {}: {} image rows vs {} text rows",
                        self.task_id,
                        validation_images.rows(),
                        validation_texts.rows()
                    )));
                }
                Ok(())
            }
        }
    }
}

fn argmax_dot(query: &[f64], keys: &DenseMatrix) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, key) in keys.iter_rows().enumerate() {
        let s = dot(query, key);
        if s > best.1 {
            best = (j, s);
        }
    }
    best.0
}

/// Scores the adapted proxy on one task's held-out data; result in [0, 1].
pub fn evaluate_task(proxy: &ProxyModel, evaluator: &TaskEvaluator) -> Result<f64> {
    evaluator.validate()?;
    match &evaluator.data {
        EvaluatorData::ZeroshotClassification { validation_images, class_prototypes, labels } => {
            let u = ProxyModel::project_rows(&proxy.image_head, validation_images)?;
            let t = ProxyModel::project_rows(&proxy.text_head, class_prototypes)?;
            let correct = u
                .iter_rows()
                .zip(labels)
                .filter(|(q, &l)| argmax_dot(q, &t) == l)
                .count();
            Ok(correct as f64 / labels.len() as f64)
        }
        EvaluatorData::Retrieval { validation_images, validation_texts } => {
            let u = ProxyModel::project_rows(&proxy.image_head, validation_images)?;
            let t = ProxyModel::project_rows(&proxy.text_head, validation_texts)?;
            let n = u.rows();
            let i2t = (0..n).filter(|&i| argmax_dot(u.row(i), &t) == i).count();
            let t2i = (0..n).filter(|&j| argmax_dot(t.row(j), &u) == j).count();
            Ok(0.5 * (i2t + t2i) as f64 / n as f64)
        }
    }
}

/// Builds an evaluator from one task manifest entry, reading the
/// validation block (and labels for classification) relative to the
/// manifest path.
pub fn load_evaluator(manifest_path: &Path, entry: &TaskManifestEntry) -> Result<TaskEvaluator> {
    let validation_rel = entry.validation_path.as_ref().ok_or_else(|| {
        TadsError::InvalidConfig(format!(
            "task {} has no validation_path; the feedback loop needs one",
            entry.task_id
        ))
    })?;
    let validation = read_embedding_block(&resolve_manifest_path(manifest_path, validation_rel))?;
    let data = match entry.evaluator_kind {
        EvaluatorKind::ZeroshotClassification => {
            let labels_rel = entry.labels_path.as_ref().ok_or_else(|| {
                TadsError::InvalidConfig(format!(
                    "task {} is zeroshot_classification but has no labels_path",
                    entry.task_id
                ))
            })?;
            let labels_path = resolve_manifest_path(manifest_path, labels_rel);
            let bytes = std::fs::read(&labels_path).map_err(|e| TadsError::io(&labels_path, e))?;
            let labels: Vec<usize> = serde_json::from_slice(&bytes)
                .map_err(|e| TadsError::json(format!("labels {}", labels_path.display()), e))?;
            let class_prototypes = crate::corpus::read_text_block(&resolve_manifest_path(
                manifest_path,
                &entry.prototype_path,
            ))?;
            EvaluatorData::ZeroshotClassification {
                validation_images: validation.image().clone(),
                class_prototypes,
                labels,
            }
        }
        EvaluatorKind::Retrieval => EvaluatorData::Retrieval {
            validation_images: validation.image().clone(),
            validation_texts: validation.text().clone(),
        },
    };
    let evaluator = TaskEvaluator { task_id: entry.task_id.clone(), weight: entry.weight, data };
    evaluator.validate()?;
    Ok(evaluator)
}

/// Loads every task's evaluator from a task manifest.
pub fn load_evaluators(manifest_path: &Path, manifest: &TaskManifest) -> Result<Vec<TaskEvaluator>> {
    manifest
        .tasks
        .iter()
        .map(|entry| load_evaluator(manifest_path, entry))
        .collect()
}

//! Gold label-set construction and the quality head itself.
//!
//! The gold ("true") set anchors training: positives are the best-aligned
//! corpus samples, negatives are those same samples with their text side
//! swapped for another record's caption (shuffled) or for the least
//! compatible text embedding in the corpus (mismatch). The predictor MLP
//! then minimizes `lambda1 * BCE(gold) + lambda2 * MSE(weak labels)` with
//! mini-batch Adam over a seeded batch order.

use serde::{Deserialize, Serialize};

use super::{extract_features, extract_features_crossed, OperatorFeatureVector};
use crate::corpus::{alignment_score, EmbeddingBlock, SampleRecord};
use crate::error::{Result, TadsError};
use crate::numeric::{cosine_similarity, Activation, AdamState, DenseMatrix, Mlp, MlpGradients, RngStream};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelProvenance {
    CuratedPositive,
    ShuffledNegative,
    MismatchNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueLabelEntry {
    pub features: OperatorFeatureVector,
    pub label: u8,
    pub provenance: LabelProvenance,
    /// Id of the record whose image side anchors this entry.
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueLabelSet {
    pub entries: Vec<TrueLabelEntry>,
}

impl TrueLabelSet {
    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.label == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.entries.len() - self.positives()
    }
}

/// Builds a gold label set of roughly `size` entries: `ceil(size/2)`
/// positives from the top of the alignment ranking, the rest alternating
/// shuffled and mismatch negatives derived from those positives.
pub fn build_true_label_set(
    records: &[SampleRecord],
    block: &EmbeddingBlock,
    ocr_embeddings: Option<&DenseMatrix>,
    stream: &RngStream,
    size: usize,
) -> Result<TrueLabelSet> {
    if records.len() < 2 {
        return Err(TadsError::DegenerateInput(
            "gold set construction needs at least two records".into(),
        ));
    }
    if size < 2 {
        return Err(TadsError::InvalidConfig("gold set size must be >= 2".into()));
    }
    let n_pos = size.div_ceil(2);
    if n_pos > records.len() {
        return Err(TadsError::InvalidConfig(format!(
            "gold set of {size} needs {n_pos} positives but the pool has {}",
            records.len()
        )));
    }
    let n_neg = size - n_pos;

    let mut ranked: Vec<(usize, f64)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| alignment_score(block, r.embedding_index).map(|a| (i, a)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| records[a.0].id.cmp(&records[b.0].id)));
    let positives: Vec<usize> = ranked[..n_pos].iter().map(|&(i, _)| i).collect();

    let mut entries = Vec::with_capacity(size);
    for &i in &positives {
        entries.push(TrueLabelEntry {
            features: extract_features(&records[i], block, ocr_embeddings)?,
            label: 1,
            provenance: LabelProvenance::CuratedPositive,
            source_id: records[i].id.clone(),
        });
    }

    let mut rng = stream.derive("gold-negatives").rng();
    for j in 0..n_neg {
        let src = positives[j % positives.len()];
        let (donor, provenance) = if j % 2 == 0 {
            let mut donor = rng.gen_range(0..records.len());
            while donor == src {
                donor = rng.gen_range(0..records.len());
            }
            (donor, LabelProvenance::ShuffledNegative)
        } else {
            let image = block.image_row(records[src].embedding_index)?;
            let mut worst = (usize::MAX, f64::INFINITY);
            for (cand, rec) in records.iter().enumerate() {
                let cos = cosine_similarity(image, block.text_row(rec.embedding_index)?)?;
                if cos < worst.1 {
                    worst = (cand, cos);
                }
            }
            (worst.0, LabelProvenance::MismatchNegative)
        };
        entries.push(TrueLabelEntry {
            features: extract_features_crossed(&records[src], &records[donor], block, ocr_embeddings)?,
            label: 0,
            provenance,
            source_id: records[src].id.clone(),
        });
    }

    let set = TrueLabelSet { entries };
    debug_assert!(set.positives() > 0 && set.negatives() > 0);
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityTrainConfig {
    /// Weight on the gold-set BCE term.
    pub lambda1: f64,
    /// Weight on the weak-label MSE term.
    pub lambda2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for QualityTrainConfig {
    fn default() -> Self {
        QualityTrainConfig {
            lambda1: 1.0,
            lambda2: 0.5,
            epochs: 40,
            learning_rate: 1e-3,
            batch_size: 64,
            hidden: vec![32, 16],
        }
    }
}

#[derive(Debug, Clone)]
pub struct QualityPredictor {
    pub net: Mlp,
    pub config: QualityTrainConfig,
    pub seed: u64,
}

/// Hybrid objective on explicit predictions:
/// `lambda1 * mean BCE(gold) + lambda2 * mean MSE(weak)`. Either slice may
/// be empty, dropping its term.
pub fn hybrid_loss(lambda1: f64, lambda2: f64, gold: &[(f64, f64)], weak: &[(f64, f64)]) -> f64 {
    let mut loss = 0.0;
    if !gold.is_empty() {
        let bce: f64 = gold
            .iter()
            .map(|&(q, y)| {
                let qc = q.clamp(1e-12, 1.0 - 1e-12);
                -(y * qc.ln() + (1.0 - y) * (1.0 - qc).ln())
            })
            .sum();
        loss += lambda1 * bce / gold.len() as f64;
    }
    if !weak.is_empty() {
        let mse: f64 = weak.iter().map(|&(q, y)| (q - y) * (q - y)).sum();
        loss += lambda2 * mse / weak.len() as f64;
    }
    loss
}

/// Trains the quality head. Returns the predictor and the full-objective
/// value after each epoch.
pub fn train_quality_predictor(
    pool_features: &[OperatorFeatureVector],
    weak: &[f64],
    true_set: &TrueLabelSet,
    cfg: &QualityTrainConfig,
    stream: &RngStream,
) -> Result<(QualityPredictor, Vec<f64>)> {
    if cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0 || (cfg.lambda1 == 0.0 && cfg.lambda2 == 0.0) {
        return Err(TadsError::InvalidConfig(
            "loss weights must be non-negative and not both zero".into(),
        ));
    }
    if cfg.lambda1 > 0.0 && true_set.entries.is_empty() {
        return Err(TadsError::InvalidConfig("gold set is empty but lambda1 > 0".into()));
    }
    if pool_features.len() != weak.len() {
        return Err(TadsError::Shape(format!(
            "{} pool features vs {} weak labels",
            pool_features.len(),
            weak.len()
        )));
    }
    if cfg.lambda2 > 0.0 && pool_features.is_empty() {
        return Err(TadsError::InvalidConfig("pool is empty but lambda2 > 0".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(TadsError::InvalidConfig("epochs and batch_size must be positive".into()));
    }

    let mut dims = vec![super::FEATURE_DIM];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(1);
    let mut activations = vec![Activation::Relu; cfg.hidden.len()];
    activations.push(Activation::Sigmoid);
    let mut net = Mlp::seeded(&dims, &activations, &stream.derive("init"))?;
    let mut adam = AdamState::new(net.param_count(), cfg.learning_rate);
    let mut rng = stream.derive("batches").rng();

    let gold: Vec<(&OperatorFeatureVector, f64)> = true_set
        .entries
        .iter()
        .map(|e| (&e.features, f64::from(e.label)))
        .collect();

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut gold_order: Vec<usize> = (0..gold.len()).collect();
    let mut pool_order: Vec<usize> = (0..pool_features.len()).collect();
    for _ in 0..cfg.epochs {
        gold_order.shuffle(&mut rng);
        pool_order.shuffle(&mut rng);
        let gold_batches = batches(gold_order.len(), cfg.batch_size);
        let pool_batches = batches(pool_order.len(), cfg.batch_size);
        let steps = gold_batches.max(pool_batches).max(1);
        for step in 0..steps {
            let mut grads = MlpGradients::zeros_like(&net);
            if cfg.lambda1 > 0.0 && gold_batches > 0 {
                let batch = batch_slice(&gold_order, step % gold_batches, cfg.batch_size);
                let scale = cfg.lambda1 / batch.len() as f64;
                for &gi in batch {
                    let (fv, y) = gold[gi];
                    let trace = net.forward_trace(&fv.values)?;
                    let q = trace.output()[0].clamp(1e-7, 1.0 - 1e-7);
                    let upstream = scale * (q - y) / (q * (1.0 - q));
                    let (g, _) = net.backward(&trace, &[upstream])?;
                    grads.accumulate(&g);
                }
            }
            if cfg.lambda2 > 0.0 && pool_batches > 0 {
                let batch = batch_slice(&pool_order, step % pool_batches, cfg.batch_size);
                let scale = cfg.lambda2 / batch.len() as f64;
                for &pi in batch {
                    let trace = net.forward_trace(&pool_features[pi].values)?;
                    let q = trace.output()[0];
                    let upstream = scale * 2.0 * (q - weak[pi]);
                    let (g, _) = net.backward(&trace, &[upstream])?;
                    grads.accumulate(&g);
                }
            }
            let mut params = net.params_flat();
            adam.step(&mut params, &grads.flat())?;
            net.set_params_flat(&params)?;
        }

        let gold_preds: Vec<(f64, f64)> = gold
            .iter()
            .map(|(fv, y)| Ok((net.forward(&fv.values)?[0], *y)))
            .collect::<Result<_>>()?;
        let weak_preds: Vec<(f64, f64)> = pool_features
            .iter()
            .zip(weak)
            .map(|(fv, &y)| Ok((net.forward(&fv.values)?[0], y)))
            .collect::<Result<_>>()?;
        curve.push(hybrid_loss(cfg.lambda1, cfg.lambda2, &gold_preds, &weak_preds));
    }

    let predictor = QualityPredictor { net, config: cfg.clone(), seed: stream.child_seed() };
    Ok((predictor, curve))
}

fn batches(len: usize, batch_size: usize) -> usize {
    len.div_ceil(batch_size)
}

fn batch_slice(order: &[usize], batch: usize, batch_size: usize) -> &[usize] {
    let start = batch * batch_size;
    &order[start..(start + batch_size).min(order.len())]
}

/// Quality score in (0, 1) for one feature vector.
pub fn predict_quality(pred: &QualityPredictor, fv: &OperatorFeatureVector) -> Result<f64> {
    Ok(pred.net.forward(&fv.values)?[0])
}

/// Area under the ROC curve by the rank statistic, ties handled with
/// average ranks. Needs both classes present.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(TadsError::Shape(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TadsError::DegenerateInput("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter_map(|(&l, &r)| l.then_some(r))
        .sum();
    let auc = (pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64);
    Ok(auc)
}

//! Feedback-driven optimization of the value network.
//!
//! Each meta-iteration scores the pool, samples a Bernoulli subset from
//! those scores, adapts the proxy on the subset, and reads off a weighted
//! multi-task reward. Cluster-level advantages come from forward
//! differences: bump every member of one cluster by a small amount and
//! re-run the whole sample-train-evaluate pipeline. With common random
//! numbers the baseline and all perturbed evaluations replay identical
//! draws, so the difference isolates the score change. The advantages then
//! drive one policy-gradient step on the network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diversity::ClusterAssignment;
use crate::dvn::{dvn_forward_many, dvn_update, DvnParams, ValueProfile};
use crate::error::{Result, TadsError};
use crate::numeric::{AdamState, DenseMatrix, RngStream};
use crate::proxy::{evaluate_task, train_proxy, ProxyConfig, ProxyModel, TaskEvaluator};
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaRewardConfig {
    /// Per-task mixing weights. Empty means "take them from the task
    /// manifest"; either way they must sum to 1.
    pub weights: Vec<f64>,
    /// Forward-difference perturbation magnitude. Zero is allowed as a
    /// diagnostic setting and yields zero advantages by definition.
    pub sigma_pert: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    /// Replay identical sampling and training randomness across the
    /// baseline and every perturbed evaluation.
    pub common_random_numbers: bool,
}

impl Default for MetaRewardConfig {
    fn default() -> Self {
        MetaRewardConfig {
            weights: Vec::new(),
            sigma_pert: 0.05,
            clamp_lo: 1e-4,
            clamp_hi: 1.0 - 1e-4,
            common_random_numbers: true,
        }
    }
}

impl MetaRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_pert.is_finite() && self.sigma_pert >= 0.0) {
            return Err(TadsError::InvalidConfig(format!(
                "sigma_pert = {}, need a finite value >= 0",
                self.sigma_pert
            )));
        }
        if !(self.clamp_lo > 0.0 && self.clamp_hi < 1.0 && self.clamp_lo < self.clamp_hi) {
            return Err(TadsError::InvalidConfig(format!(
                "clamp bounds ({}, {}) must satisfy 0 < lo < hi < 1",
                self.clamp_lo, self.clamp_hi
            )));
        }
        if !self.weights.is_empty() {
            check_weights(&self.weights)?;
        }
        Ok(())
    }

    /// Final per-task weights: the explicit override when present,
    /// otherwise the evaluators' manifest weights.
    pub fn resolved_weights(&self, evaluators: &[TaskEvaluator]) -> Result<Vec<f64>> {
        if evaluators.is_empty() {
            return Err(TadsError::InvalidConfig("no task evaluators configured".into()));
        }
        if self.weights.is_empty() {
            let weights: Vec<f64> = evaluators.iter().map(|e| e.weight).collect();
            check_weights(&weights)?;
            return Ok(weights);
        }
        if self.weights.len() != evaluators.len() {
            return Err(TadsError::Shape(format!(
                "{} weights for {} evaluators",
                self.weights.len(),
                evaluators.len()
            )));
        }
        Ok(self.weights.clone())
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
        return Err(TadsError::InvalidConfig("task weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(TadsError::InvalidConfig(format!(
            "task weights sum to {total}, need 1"
        )));
    }
    Ok(())
}

/// Weighted mixture of per-task evaluation metrics.
pub fn meta_reward(evals: &[f64], weights: &[f64]) -> Result<f64> {
    if evals.len() != weights.len() {
        return Err(TadsError::Shape(format!(
            "{} evals vs {} weights",
            evals.len(),
            weights.len()
        )));
    }
    Ok(evals.iter().zip(weights).map(|(e, w)| e * w).sum())
}

/// Draws an inclusion mask: sample `i` is kept iff its uniform draw lands
/// at or below `scores[i]`. Returns the mask and the kept indices.
pub fn bernoulli_select(scores: &[f64], stream: &RngStream) -> Result<(Vec<bool>, Vec<usize>)> {
    if let Some(&bad) = scores.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(TadsError::NumericalDomain(format!(
            "inclusion probability {bad} outside [0, 1]"
        )));
    }
    let mut rng = stream.rng();
    let mut mask = Vec::with_capacity(scores.len());
    let mut kept = Vec::new();
    for (i, &v) in scores.iter().enumerate() {
        let selected = rng.gen::<f64>() <= v;
        mask.push(selected);
        if selected {
            kept.push(i);
        }
    }
    Ok((mask, kept))
}

/// Scores with one cluster's members bumped by `sigma` and clamped back
/// into valid Bernoulli range. A zero `sigma` returns the input untouched
/// so that common-random-number replays are bit-identical.
pub fn perturb_scores(
    scores: &[f64],
    members: &[usize],
    sigma: f64,
    clamp_lo: f64,
    clamp_hi: f64,
) -> Vec<f64> {
    let mut out = scores.to_vec();
    if sigma == 0.0 {
        return out;
    }
    for &i in members {
        out[i] = (out[i] + sigma).clamp(clamp_lo, clamp_hi);
    }
    out
}

/// Forward-difference advantage per cluster. `reward_fn(scores, salt)`
/// runs the full subset-sample/train/evaluate pipeline; the salt selects
/// the randomness stream, and common random numbers reuse salt 0
/// everywhere. The baseline reward must already come from salt 0.
pub fn cluster_advantages(
    scores: &[f64],
    assignment: &ClusterAssignment,
    baseline_reward: f64,
    cfg: &MetaRewardConfig,
    reward_fn: &(dyn Fn(&[f64], u64) -> Result<f64> + Sync),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if scores.len() != assignment.len() {
        return Err(TadsError::Shape(format!(
            "{} scores vs {} assigned samples",
            scores.len(),
            assignment.len()
        )));
    }
    (0..assignment.n_clusters())
        .into_par_iter()
        .map(|c| {
            let members = assignment.members(c);
            let perturbed =
                perturb_scores(scores, &members, cfg.sigma_pert, cfg.clamp_lo, cfg.clamp_hi);
            let salt = if cfg.common_random_numbers { 0 } else { 1 + c as u64 };
            let reward = reward_fn(&perturbed, salt)?;
            if cfg.sigma_pert == 0.0 {
                return Ok(0.0);
            }
            Ok((reward - baseline_reward) / cfg.sigma_pert)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdoConfig {
    pub meta: MetaRewardConfig,
    pub proxy: ProxyConfig,
    /// Meta-iteration count of the outer loop.
    pub iterations: usize,
    /// Adam learning rate for the value-network update.
    pub dvn_learning_rate: f64,
    /// Final selection threshold on the value scores.
    pub threshold: f64,
}

impl Default for FdoConfig {
    fn default() -> Self {
        FdoConfig {
            meta: MetaRewardConfig::default(),
            proxy: ProxyConfig::default(),
            iterations: 50,
            dvn_learning_rate: 1e-3,
            threshold: 0.5,
        }
    }
}

impl FdoConfig {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.proxy.validate()?;
        if self.iterations == 0 {
            return Err(TadsError::InvalidConfig("iterations must be positive".into()));
        }
        if !(self.dvn_learning_rate.is_finite() && self.dvn_learning_rate >= 0.0) {
            return Err(TadsError::InvalidConfig(format!(
                "dvn_learning_rate = {}, need a finite value >= 0",
                self.dvn_learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(TadsError::InvalidConfig(format!(
                "threshold = {}, need a value in [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// The pool as the feedback loop sees it: one profile per sample plus the
/// raw embeddings the proxy trains on, all positionally aligned.
#[derive(Debug, Clone)]
pub struct FdoPool {
    pub profiles: Vec<ValueProfile>,
    pub images: DenseMatrix,
    pub texts: DenseMatrix,
}

impl FdoPool {
    pub fn new(profiles: Vec<ValueProfile>, images: DenseMatrix, texts: DenseMatrix) -> Result<Self> {
        if profiles.len() != images.rows() || profiles.len() != texts.rows() {
            return Err(TadsError::Shape(format!(
                "{} profiles vs {} image rows vs {} text rows",
                profiles.len(),
                images.rows(),
                texts.rows()
            )));
        }
        if profiles.is_empty() {
            return Err(TadsError::DegenerateInput("the optimization pool is empty".into()));
        }
        Ok(FdoPool { profiles, images, texts })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdoState {
    pub iteration: usize,
    /// Value scores used by the most recent iteration.
    pub scores: Vec<f64>,
    /// Advantage per cluster from the most recent iteration.
    pub advantages: Vec<f64>,
    pub reward_history: Vec<f64>,
}

impl FdoState {
    pub fn fresh(pool_size: usize) -> Self {
        FdoState {
            iteration: 0,
            scores: vec![0.0; pool_size],
            advantages: Vec::new(),
            reward_history: Vec::new(),
        }
    }
}

/// One meta-iteration's log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub reward: f64,
    pub task_evals: Vec<f64>,
    pub subset_size: usize,
    pub mean_score: f64,
    pub cluster_advantages: Vec<f64>,
}

struct RewardDetail {
    reward: f64,
    task_evals: Vec<f64>,
    subset_size: usize,
}

/// Samples a subset from `scores`, adapts a fresh proxy clone on it, and
/// evaluates every task. An undersized subset (fewer than 2 pairs) scores
/// 0 on everything rather than aborting the loop.
fn evaluate_scores(
    scores: &[f64],
    salt: u64,
    pool: &FdoPool,
    base_proxy: &ProxyModel,
    evaluators: &[TaskEvaluator],
    weights: &[f64],
    iter_stream: &RngStream,
) -> Result<RewardDetail> {
    let draw = iter_stream.derive_indexed("draw", salt);
    let (_, kept) = bernoulli_select(scores, &draw.derive("bernoulli"))?;
    if kept.len() < 2 {
        return Ok(RewardDetail {
            reward: 0.0,
            task_evals: vec![0.0; evaluators.len()],
            subset_size: kept.len(),
        });
    }
    let images = pool.images.gather_rows(&kept)?;
    let texts = pool.texts.gather_rows(&kept)?;
    let mut proxy = base_proxy.clone();
    train_proxy(&mut proxy, &images, &texts, &draw.derive("proxy"))?;
    let task_evals: Vec<f64> = evaluators
        .iter()
        .map(|e| evaluate_task(&proxy, e))
        .collect::<Result<_>>()?;
    let reward = meta_reward(&task_evals, weights)?;
    Ok(RewardDetail { reward, task_evals, subset_size: kept.len() })
}

/// Runs one full meta-iteration: score, sample, adapt, evaluate, estimate
/// advantages, update the network, and log.
#[allow(clippy::too_many_arguments)]
pub fn fdo_iteration(
    state: &mut FdoState,
    params: &mut DvnParams,
    adam: &mut AdamState,
    pool: &FdoPool,
    base_proxy: &ProxyModel,
    evaluators: &[TaskEvaluator],
    assignment: &ClusterAssignment,
    cfg: &FdoConfig,
    run_stream: &RngStream,
) -> Result<IterationLog> {
    cfg.validate()?;
    if assignment.len() != pool.len() {
        return Err(TadsError::Shape(format!(
            "assignment covers {} samples, pool has {}",
            assignment.len(),
            pool.len()
        )));
    }
    let weights = cfg.meta.resolved_weights(evaluators)?;
    let iter_stream = run_stream.derive_indexed("iter", state.iteration as u64);

    let scores = dvn_forward_many(params, &pool.profiles)?;
    let baseline = evaluate_scores(
        &scores,
        0,
        pool,
        base_proxy,
        evaluators,
        &weights,
        &iter_stream,
    )?;
    let reward_fn = |v: &[f64], salt: u64| -> Result<f64> {
        Ok(evaluate_scores(v, salt, pool, base_proxy, evaluators, &weights, &iter_stream)?.reward)
    };
    let advantages =
        cluster_advantages(&scores, assignment, baseline.reward, &cfg.meta, &reward_fn)?;
    dvn_update(params, &pool.profiles, &assignment.labels, &advantages, adam)?;

    state.iteration += 1;
    state.scores = scores;
    state.advantages = advantages.clone();
    state.reward_history.push(baseline.reward);

    let mean_score = state.scores.iter().sum::<f64>() / state.scores.len() as f64;
    Ok(IterationLog {
        iteration: state.iteration,
        reward: baseline.reward,
        task_evals: baseline.task_evals,
        subset_size: baseline.subset_size,
        mean_score,
        cluster_advantages: advantages,
    })
}

/// Full meta-training loop over `cfg.iterations` iterations.
pub fn run_fdo(
    params: &mut DvnParams,
    pool: &FdoPool,
    evaluators: &[TaskEvaluator],
    assignment: &ClusterAssignment,
    cfg: &FdoConfig,
    stream: &RngStream,
) -> Result<(FdoState, Vec<IterationLog>)> {
    cfg.validate()?;
    let base_proxy = ProxyModel::seeded(
        pool.images.cols(),
        &cfg.proxy,
        &stream.derive("proxy-init"),
    )?;
    let mut adam = AdamState::new(params.param_count(), cfg.dvn_learning_rate);
    let mut state = FdoState::fresh(pool.len());
    let mut logs = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        logs.push(fdo_iteration(
            &mut state,
            params,
            &mut adam,
            pool,
            &base_proxy,
            evaluators,
            assignment,
            cfg,
            stream,
        )?);
    }
    Ok((state, logs))
}

/// Deterministic final selection: indices whose score strictly exceeds
/// the threshold.
pub fn final_select(params: &DvnParams, profiles: &[ValueProfile], tau: f64) -> Result<Vec<usize>> {
    let scores = dvn_forward_many(params, profiles)?;
    Ok(scores
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| (v > tau).then_some(i))
        .collect())
}

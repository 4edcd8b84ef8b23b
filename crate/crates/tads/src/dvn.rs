//! The data value network: three projection heads plus a fused scoring MLP.
//!
//! Each sample enters as a profile (quality, relevance vector, diversity
//! factor). Quality and diversity pass through scalar embedding heads, the
//! relevance vector through its own head, and the concatenated embeddings
//! through a sigmoid-capped fusion MLP, yielding a value in (0, 1) used as
//! the sample's Bernoulli inclusion probability.
//!
//! Training follows a REINFORCE-style policy objective: cluster-level
//! advantages weight the log-scores of member samples, plus an L2 penalty
//! on all parameters. Gradients are analytic end to end.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TadsError};
use crate::numeric::{Activation, AdamState, ForwardTrace, Mlp, MlpGradients, RngStream};
use crate::relevance::RelevanceVector;

/// Per-sample input to the value network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueProfile {
    pub quality: f64,
    pub relevance: RelevanceVector,
    pub diversity: f64,
}

impl ValueProfile {
    pub fn new(quality: f64, relevance: RelevanceVector, diversity: f64) -> Result<Self> {
        if !(quality.is_finite() && quality > 0.0 && quality < 1.0) {
            return Err(TadsError::NumericalDomain(format!(
                "quality score {quality} outside (0, 1)"
            )));
        }
        if !(diversity.is_finite() && diversity > 0.0 && diversity <= 1.0) {
            return Err(TadsError::NumericalDomain(format!(
                "diversity factor {diversity} outside (0, 1]"
            )));
        }
        if relevance.values.iter().any(|v| !v.is_finite()) {
            return Err(TadsError::NumericalDomain("non-finite relevance entry".into()));
        }
        Ok(ValueProfile { quality, relevance, diversity })
    }

    pub fn n_tasks(&self) -> usize {
        self.relevance.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DvnConfig {
    /// Output width of each projection head.
    pub hidden_width: usize,
    /// Hidden layer widths of the fusion MLP (its input is `3 * hidden_width`,
    /// its output a single sigmoid unit).
    pub fusion_hidden: Vec<usize>,
    /// L2 penalty coefficient on all parameters.
    pub l2_coefficient: f64,
}

impl Default for DvnConfig {
    fn default() -> Self {
        DvnConfig { hidden_width: 16, fusion_hidden: vec![32], l2_coefficient: 1e-4 }
    }
}

impl DvnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(TadsError::InvalidConfig("hidden_width must be positive".into()));
        }
        if self.fusion_hidden.iter().any(|&w| w == 0) {
            return Err(TadsError::InvalidConfig("fusion hidden widths must be positive".into()));
        }
        if !(self.l2_coefficient.is_finite() && self.l2_coefficient >= 0.0) {
            return Err(TadsError::InvalidConfig(format!(
                "l2_coefficient = {}, need a finite value >= 0",
                self.l2_coefficient
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DvnParams {
    pub quality_head: Mlp,
    pub relevance_head: Mlp,
    pub diversity_head: Mlp,
    pub fusion: Mlp,
    pub l2_coefficient: f64,
    pub seed: u64,
}

impl DvnParams {
    fn head_dims(input: usize, h: usize) -> Vec<usize> {
        vec![input, h, h]
    }

    fn fusion_dims(cfg: &DvnConfig) -> Vec<usize> {
        let mut dims = vec![3 * cfg.hidden_width];
        dims.extend_from_slice(&cfg.fusion_hidden);
        dims.push(1);
        dims
    }

    fn build(n_tasks: usize, cfg: &DvnConfig, stream: Option<&RngStream>) -> Result<Self> {
        cfg.validate()?;
        if n_tasks == 0 {
            return Err(TadsError::InvalidConfig("need at least one task".into()));
        }
        let h = cfg.hidden_width;
        let head_acts = [Activation::Relu, Activation::Identity];
        let mut fusion_acts = vec![Activation::Relu; cfg.fusion_hidden.len()];
        fusion_acts.push(Activation::Sigmoid);

        let make = |dims: &[usize], acts: &[Activation], purpose: &str| -> Result<Mlp> {
            match stream {
                Some(s) => Mlp::seeded(dims, acts, &s.derive(purpose)),
                None => Mlp::zeros(dims, acts),
            }
        };
        Ok(DvnParams {
            quality_head: make(&Self::head_dims(1, h), &head_acts, "quality-head")?,
            relevance_head: make(&Self::head_dims(n_tasks, h), &head_acts, "relevance-head")?,
            diversity_head: make(&Self::head_dims(1, h), &head_acts, "diversity-head")?,
            fusion: make(&Self::fusion_dims(cfg), &fusion_acts, "fusion")?,
            l2_coefficient: cfg.l2_coefficient,
            seed: stream.map_or(0, RngStream::child_seed),
        })
    }

    pub fn zeros(n_tasks: usize, cfg: &DvnConfig) -> Result<Self> {
        Self::build(n_tasks, cfg, None)
    }

    pub fn seeded(n_tasks: usize, cfg: &DvnConfig, stream: &RngStream) -> Result<Self> {
        Self::build(n_tasks, cfg, Some(stream))
    }

    pub fn n_tasks(&self) -> usize {
        self.relevance_head.layer_dims()[0]
    }

    pub fn hidden_width(&self) -> usize {
        self.quality_head.output_dim()
    }

    fn nets(&self) -> [&Mlp; 4] {
        [&self.quality_head, &self.relevance_head, &self.diversity_head, &self.fusion]
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    /// All parameters in one vector: quality head, relevance head,
    /// diversity head, then fusion.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for net in self.nets() {
            flat.extend(net.params_flat());
        }
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(TadsError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for net in [
            &mut self.quality_head,
            &mut self.relevance_head,
            &mut self.diversity_head,
            &mut self.fusion,
        ] {
            let len = net.param_count();
            net.set_params_flat(&flat[offset..offset + len])?;
            offset += len;
        }
        Ok(())
    }

    pub fn l2_norm_squared(&self) -> f64 {
        self.params_flat().iter().map(|p| p * p).sum()
    }
}

struct DvnTrace {
    quality: ForwardTrace,
    relevance: ForwardTrace,
    diversity: ForwardTrace,
    fusion: ForwardTrace,
}

fn forward_traced(params: &DvnParams, profile: &ValueProfile) -> Result<DvnTrace> {
    if profile.n_tasks() != params.n_tasks() {
        return Err(TadsError::Shape(format!(
            "profile has {} tasks, network expects {}",
            profile.n_tasks(),
            params.n_tasks()
        )));
    }
    let quality = params.quality_head.forward_trace(&[profile.quality])?;
    let relevance = params.relevance_head.forward_trace(&profile.relevance.values)?;
    let diversity = params.diversity_head.forward_trace(&[profile.diversity])?;
    let mut fused = Vec::with_capacity(3 * params.hidden_width());
    fused.extend_from_slice(quality.output());
    fused.extend_from_slice(relevance.output());
    fused.extend_from_slice(diversity.output());
    let fusion = params.fusion.forward_trace(&fused)?;
    Ok(DvnTrace { quality, relevance, diversity, fusion })
}

/// Value score in (0, 1) for one profile.
pub fn dvn_forward(params: &DvnParams, profile: &ValueProfile) -> Result<f64> {
    Ok(forward_traced(params, profile)?.fusion.output()[0])
}

/// Scores a whole pool.
pub fn dvn_forward_many(params: &DvnParams, profiles: &[ValueProfile]) -> Result<Vec<f64>> {
    profiles.iter().map(|p| dvn_forward(params, p)).collect()
}

const LOG_SCORE_FLOOR: f64 = 1e-12;

/// Policy objective over precomputed scores: for each cluster `i`, the
/// advantage `g_i` weights the summed log-scores of its members, negated,
/// plus the L2 penalty.
pub fn policy_loss(
    params: &DvnParams,
    scores_by_cluster: &[Vec<f64>],
    advantages: &[f64],
) -> Result<f64> {
    if scores_by_cluster.len() != advantages.len() {
        return Err(TadsError::Shape(format!(
            "{} clusters vs {} advantages",
            scores_by_cluster.len(),
            advantages.len()
        )));
    }
    let mut loss = 0.0;
    for (scores, &g) in scores_by_cluster.iter().zip(advantages) {
        if !g.is_finite() {
            return Err(TadsError::NumericalDomain(format!("non-finite advantage {g}")));
        }
        for &v in scores {
            loss -= g * v.max(LOG_SCORE_FLOOR).ln();
        }
    }
    Ok(loss + params.l2_coefficient * params.l2_norm_squared())
}

/// Analytic gradient of the policy objective. `cluster_labels[i]` maps
/// profile `i` to its advantage. Returns the flat gradient (aligned with
/// `params_flat`) and the loss value.
pub fn policy_gradient(
    params: &DvnParams,
    profiles: &[ValueProfile],
    cluster_labels: &[usize],
    advantages: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if profiles.len() != cluster_labels.len() {
        return Err(TadsError::Shape(format!(
            "{} profiles vs {} cluster labels",
            profiles.len(),
            cluster_labels.len()
        )));
    }
    let h = params.hidden_width();
    let mut grads_q = MlpGradients::zeros_like(&params.quality_head);
    let mut grads_r = MlpGradients::zeros_like(&params.relevance_head);
    let mut grads_d = MlpGradients::zeros_like(&params.diversity_head);
    let mut grads_f = MlpGradients::zeros_like(&params.fusion);
    let mut data_loss = 0.0;

    for (profile, &label) in profiles.iter().zip(cluster_labels) {
        let g = *advantages.get(label).ok_or_else(|| {
            TadsError::Index(format!("cluster label {label} of {}", advantages.len()))
        })?;
        let trace = forward_traced(params, profile)?;
        let v = trace.fusion.output()[0].max(LOG_SCORE_FLOOR);
        data_loss -= g * v.ln();
        let upstream = -g / v;
        let (gf, fused_grad) = params.fusion.backward(&trace.fusion, &[upstream])?;
        grads_f.accumulate(&gf);
        let (gq, _) = params.quality_head.backward(&trace.quality, &fused_grad[..h])?;
        grads_q.accumulate(&gq);
        let (gr, _) = params
            .relevance_head
            .backward(&trace.relevance, &fused_grad[h..2 * h])?;
        grads_r.accumulate(&gr);
        let (gd, _) = params
            .diversity_head
            .backward(&trace.diversity, &fused_grad[2 * h..])?;
        grads_d.accumulate(&gd);
    }

    let mut flat = Vec::with_capacity(params.param_count());
    for g in [&grads_q, &grads_r, &grads_d, &grads_f] {
        flat.extend(g.flat());
    }
    let theta = params.params_flat();
    for (df, p) in flat.iter_mut().zip(&theta) {
        *df += 2.0 * params.l2_coefficient * p;
    }
    if let Some(bad) = flat.iter().find(|v| !v.is_finite()) {
        return Err(TadsError::NumericalDomain(format!("non-finite policy gradient {bad}")));
    }
    let loss = data_loss + params.l2_coefficient * params.l2_norm_squared();
    Ok((flat, loss))
}

/// One Adam step on the policy objective. Returns the pre-step loss.
pub fn dvn_update(
    params: &mut DvnParams,
    profiles: &[ValueProfile],
    cluster_labels: &[usize],
    advantages: &[f64],
    adam: &mut AdamState,
) -> Result<f64> {
    let (grad, loss) = policy_gradient(params, profiles, cluster_labels, advantages)?;
    let mut flat = params.params_flat();
    adam.step(&mut flat, &grad)?;
    params.set_params_flat(&flat)?;
    Ok(loss)
}

//! Threshold-rule labeling functions and the EM label model that turns
//! their votes into probabilistic weak labels.
//!
//! The label model is a two-class conditional-independence model in the
//! Dawid-Skene family: each labeling function has one latent accuracy, a
//! vote is correct with that probability regardless of which class is true,
//! and abstentions carry no information. EM alternates between posterior
//! estimates over the latent class and accuracy re-estimates, starting from
//! majority vote, so fitting is deterministic.

use serde::{Deserialize, Serialize};

use super::{FeatureField, OperatorFeatureVector};
use crate::error::{Result, TadsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Less,
    #[serde(rename = ">")]
    Greater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelingFunction {
    pub name: String,
    pub feature: FeatureField,
    pub comparator: Comparator,
    pub threshold: f64,
    /// +1 or -1; emitted when the comparison holds on a non-imputed field.
    pub vote_if_true: i8,
}

impl LabelingFunction {
    pub fn validate(&self) -> Result<()> {
        if self.vote_if_true != 1 && self.vote_if_true != -1 {
            return Err(TadsError::InvalidConfig(format!(
                "labeling function '{}': vote_if_true must be +1 or -1, got {}",
                self.name, self.vote_if_true
            )));
        }
        Ok(())
    }

    /// Vote on one sample: abstains (0) when the feature was imputed or the
    /// comparison is false.
    pub fn vote(&self, fv: &OperatorFeatureVector) -> i8 {
        if fv.is_imputed(self.feature) {
            return 0;
        }
        let value = fv.get(self.feature);
        let fires = match self.comparator {
            Comparator::Less => value < self.threshold,
            Comparator::Greater => value > self.threshold,
        };
        if fires {
            self.vote_if_true
        } else {
            0
        }
    }
}

fn lf(name: &str, feature: FeatureField, comparator: Comparator, threshold: f64, vote: i8) -> LabelingFunction {
    LabelingFunction { name: name.into(), feature, comparator, threshold, vote_if_true: vote }
}

/// Stock rule set: two-sided alignment thresholds plus caption length,
/// language confidence, OCR coverage, and concreteness. All overridable
/// from the pipeline config. Rules are phrased so that firing carries
/// evidence: a stub caption is a junk signal, but an ordinary-length one
/// says nothing, so the length rule votes down stubs instead of voting up
/// everything else.
pub fn default_labeling_functions() -> Vec<LabelingFunction> {
    vec![
        lf("clip_high", FeatureField::ClipCosine, Comparator::Greater, 0.75, 1),
        lf("clip_low", FeatureField::ClipCosine, Comparator::Less, 0.55, -1),
        lf("caption_stub", FeatureField::CaptionLenNorm, Comparator::Less, 0.08, -1),
        lf("lang_confident", FeatureField::LangConfidence, Comparator::Greater, 0.8, 1),
        lf("ocr_dominated", FeatureField::OcrRegionRatio, Comparator::Greater, 0.5, -1),
        lf("concrete_text", FeatureField::Concreteness, Comparator::Greater, 0.6, 1),
    ]
}

/// Vote matrix row for one sample.
pub fn apply_lfs(fv: &OperatorFeatureVector, lfs: &[LabelingFunction]) -> Result<Vec<i8>> {
    for f in lfs {
        f.validate()?;
    }
    Ok(lfs.iter().map(|f| f.vote(fv)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelModel {
    /// Per-LF probability of voting correctly given it did not abstain,
    /// clamped into [0.5, 0.99]: rules are taken as better than chance
    /// (or useless), never adversarial.
    pub accuracies: Vec<f64>,
    /// P(y = 1), clamped into [0.01, 0.99].
    pub prior: f64,
    pub em_iterations: usize,
    /// Observed-data log-likelihood after each EM iteration.
    pub log_likelihood_trace: Vec<f64>,
}

const PROB_FLOOR: f64 = 0.01;
const PROB_CEIL: f64 = 0.99;
/// Labeling functions are assumed to beat chance. Without this floor the
/// model is unidentifiable on one-sided rule sets: "one class plus inverted
/// detectors" explains every vote and EM happily converges there.
const ACCURACY_FLOOR: f64 = 0.5;

/// Fits the label model by EM from a majority-vote initialization.
pub fn fit_label_model(votes: &[Vec<i8>], em_iters: usize) -> Result<LabelModel> {
    let n = votes.len();
    let l = votes.first().map_or(0, Vec::len);
    if votes.iter().any(|row| row.len() != l) {
        return Err(TadsError::Shape("ragged vote matrix".into()));
    }
    if n == 0 || l == 0 || votes.iter().all(|row| row.iter().all(|&v| v == 0)) {
        return Err(TadsError::DegenerateInput(
            "vote matrix carries no non-abstain votes".into(),
        ));
    }

    // Majority-vote posterior init.
    let mut posteriors: Vec<f64> = votes
        .iter()
        .map(|row| {
            let sum: i32 = row.iter().map(|&v| i32::from(v)).sum();
            match sum.cmp(&0) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Less => 0.0,
                std::cmp::Ordering::Equal => 0.5,
            }
        })
        .collect();

    let mut accuracies = vec![0.5; l];
    let mut prior = 0.5;
    let mut trace = Vec::with_capacity(em_iters);
    for _ in 0..em_iters {
        // M-step: accuracy = expected fraction of correct non-abstain votes.
        for j in 0..l {
            let mut correct = 0.0;
            let mut total = 0.0;
            for (row, &mu) in votes.iter().zip(&posteriors) {
                match row[j] {
                    1 => {
                        correct += mu;
                        total += 1.0;
                    }
                    -1 => {
                        correct += 1.0 - mu;
                        total += 1.0;
                    }
                    _ => {}
                }
            }
            if total > 0.0 {
                accuracies[j] = (correct / total).clamp(ACCURACY_FLOOR, PROB_CEIL);
            }
        }
        prior = (posteriors.iter().sum::<f64>() / n as f64).clamp(PROB_FLOOR, PROB_CEIL);

        // E-step under the fresh parameters, plus the likelihood they attain.
        let mut ll = 0.0;
        for (row, mu) in votes.iter().zip(posteriors.iter_mut()) {
            let (lp1, lp0) = class_log_potentials(row, &accuracies, prior);
            let m = lp1.max(lp0);
            let log_z = m + ((lp1 - m).exp() + (lp0 - m).exp()).ln();
            *mu = (lp1 - log_z).exp();
            ll += log_z;
        }
        trace.push(ll);
    }

    Ok(LabelModel { accuracies, prior, em_iterations: em_iters, log_likelihood_trace: trace })
}

fn class_log_potentials(row: &[i8], accuracies: &[f64], prior: f64) -> (f64, f64) {
    let mut lp1 = prior.ln();
    let mut lp0 = (1.0 - prior).ln();
    for (&v, &a) in row.iter().zip(accuracies) {
        match v {
            1 => {
                lp1 += a.ln();
                lp0 += (1.0 - a).ln();
            }
            -1 => {
                lp1 += (1.0 - a).ln();
                lp0 += a.ln();
            }
            _ => {}
        }
    }
    (lp1, lp0)
}

/// Posterior P(y = 1 | votes) per row; all-abstain rows fall back to the
/// class prior.
pub fn weak_labels(model: &LabelModel, votes: &[Vec<i8>]) -> Vec<f64> {
    votes
        .iter()
        .map(|row| {
            if row.iter().all(|&v| v == 0) {
                return model.prior;
            }
            let (lp1, lp0) = class_log_potentials(row, &model.accuracies, model.prior);
            let m = lp1.max(lp0);
            let log_z = m + ((lp1 - m).exp() + (lp0 - m).exp()).ln();
            (lp1 - log_z).exp()
        })
        .collect()
}

//! Prediction quality and explanation quality metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::{Explanation, NodeScore};
use crate::model::{ModelError, NodeModel};
use crate::plan::{isolate_runtimes, NodeId, PlanGraph};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `max(p/a, a/p)` for strictly positive runtimes.
pub fn q_error(predicted_ms: f64, actual_ms: f64) -> Result<f64, MetricError> {
    let ok = |v: f64| v.is_finite() && v > 0.0;
    if !ok(predicted_ms) || !ok(actual_ms) {
        return Err(MetricError::Contract(format!(
            "q_error needs positive runtimes, got predicted {predicted_ms} and actual {actual_ms}"
        )));
    }
    Ok((predicted_ms / actual_ms).max(actual_ms / predicted_ms))
}

/// Linearly interpolated quantile; `NaN` for an empty slice.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Node ids by descending normalized score, ties by ascending id.
pub fn node_ranking(explanation: &Explanation) -> Vec<NodeId> {
    let mut scores: Vec<&NodeScore> = explanation.scores.iter().collect();
    scores.sort_by(|a, b| {
        b.normalized
            .total_cmp(&a.normalized)
            .then(a.node_id.cmp(&b.node_id))
    });
    scores.into_iter().map(|s| s.node_id).collect()
}

/// 1-based ranks, tied values sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation; `None` when undefined (fewer than two
/// points, mismatched lengths, or a constant input).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

fn fractions(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        values.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / values.len() as f64; values.len()]
    }
}

fn check_covers(explanation: &Explanation, plan: &PlanGraph) -> Result<(), MetricError> {
    if explanation.covers(plan) {
        Ok(())
    } else {
        Err(MetricError::Contract(format!(
            "explanation for {} does not cover the nodes of plan {}",
            explanation.plan_id,
            plan.plan_id()
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeCorrelation {
    /// Isolated runtime share per operator node.
    pub runtime_fractions: BTreeMap<NodeId, f64>,
    /// Importance renormalized over operator nodes.
    pub importance_fractions: BTreeMap<NodeId, f64>,
    pub spearman_runtime: Option<f64>,
}

/// Importance fractions restricted to operator nodes, in plan order.
fn operator_importance(explanation: &Explanation, plan: &PlanGraph) -> (Vec<NodeId>, Vec<f64>) {
    let ids: Vec<NodeId> = plan.operators().map(|n| n.id).collect();
    let scores: Vec<f64> = ids
        .iter()
        .map(|id| explanation.score(*id).map_or(0.0, |s| s.normalized))
        .collect();
    let fr = if ids.is_empty() {
        Vec::new()
    } else {
        fractions(&scores)
    };
    (ids, fr)
}

pub fn runtime_correlation(
    explanation: &Explanation,
    plan: &PlanGraph,
) -> Result<RuntimeCorrelation, MetricError> {
    check_covers(explanation, plan)?;
    let (ids, importance) = operator_importance(explanation, plan);
    let isolated = isolate_runtimes(plan);
    let runtimes: Vec<f64> = ids
        .iter()
        .map(|id| isolated.get(*id).unwrap_or(0.0))
        .collect();
    let runtime = if ids.is_empty() {
        Vec::new()
    } else {
        fractions(&runtimes)
    };
    let spearman_runtime = if ids.len() >= 2 {
        spearman(&importance, &runtime)
    } else {
        None
    };
    Ok(RuntimeCorrelation {
        runtime_fractions: ids.iter().copied().zip(runtime).collect(),
        importance_fractions: ids.iter().copied().zip(importance).collect(),
        spearman_runtime,
    })
}

/// Spearman ρ between operator importance and actual output cardinality.
pub fn cardinality_correlation(
    explanation: &Explanation,
    plan: &PlanGraph,
) -> Result<Option<f64>, MetricError> {
    check_covers(explanation, plan)?;
    let (ids, importance) = operator_importance(explanation, plan);
    if ids.len() < 2 {
        return Ok(None);
    }
    let cards: Option<Vec<f64>> = ids
        .iter()
        .map(|id| plan.node(*id).and_then(|n| n.feature("actual_cardinality")))
        .collect();
    Ok(cards.and_then(|c| spearman(&importance, &c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidelityConfig {
    pub k_fraction: f64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self { k_fraction: 0.25 }
    }
}

impl FidelityConfig {
    /// Number of nodes masked on each side for a plan of `n` nodes.
    pub fn k(&self, n: usize) -> Result<usize, MetricError> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 0.5) {
            return Err(MetricError::Contract(format!(
                "k_fraction {} outside (0, 0.5]",
                self.k_fraction
            )));
        }
        Ok(((self.k_fraction * n as f64).ceil() as usize).clamp(1, n.max(1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub fidelity_plus: f64,
    pub fidelity_minus_quality: f64,
}

/// Masks the top-k and bottom-k ranked nodes and scores the prediction shift.
///
/// `fidelity_plus = δ(top-k masked)`, `fidelity_minus_quality = 1 − δ(bottom-k masked)`
/// with `δ(a) = min(1, |a − ŷ| / ŷ)`.
pub fn fidelity(
    model: &dyn NodeModel,
    plan: &PlanGraph,
    explanation: &Explanation,
    config: &FidelityConfig,
) -> Result<Fidelity, MetricError> {
    check_covers(explanation, plan)?;
    let n = plan.len();
    let k = config.k(n)?;
    let base = model.masked_prediction(plan, None)?;
    if !(base.is_finite() && base > 0.0) {
        return Err(MetricError::Contract(format!(
            "prediction {base} is not positive"
        )));
    }
    let ranking = node_ranking(explanation);
    let delta = |ids: &[NodeId]| -> Result<f64, MetricError> {
        let mut factors = vec![1.0; n];
        for id in ids {
            factors[plan.position(*id).expect("covered")] = 0.0;
        }
        let y = model.masked_prediction(plan, Some(&factors))?;
        Ok(((y - base).abs() / base).min(1.0))
    };
    Ok(Fidelity {
        fidelity_plus: delta(&ranking[..k])?,
        fidelity_minus_quality: 1.0 - delta(&ranking[n - k..])?,
    })
}

/// Weighted harmonic mean of the two fidelity qualities; 0 if either is 0.
pub fn characterization_score_weighted(
    fidelity_plus: f64,
    fidelity_minus_quality: f64,
    w_plus: f64,
    w_minus: f64,
) -> f64 {
    if fidelity_plus <= 0.0 || fidelity_minus_quality <= 0.0 {
        return 0.0;
    }
    (w_plus + w_minus) / (w_plus / fidelity_plus + w_minus / fidelity_minus_quality)
}

pub fn characterization_score(fidelity_plus: f64, fidelity_minus_quality: f64) -> f64 {
    characterization_score_weighted(fidelity_plus, fidelity_minus_quality, 0.5, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub plan_id: String,
    pub algorithm: crate::explain::Algorithm,
    pub ranking: Vec<NodeId>,
    pub runtime_fractions: BTreeMap<NodeId, f64>,
    pub importance_fractions: BTreeMap<NodeId, f64>,
    pub spearman_runtime: Option<f64>,
    pub spearman_cardinality: Option<f64>,
    pub fidelity_plus: f64,
    pub fidelity_minus_quality: f64,
    pub characterization: f64,
    pub predicted_runtime_ms: f64,
    pub actual_runtime_ms: f64,
    pub q_error: f64,
}

pub fn build_report(
    model: &dyn NodeModel,
    plan: &PlanGraph,
    explanation: &Explanation,
    config: &FidelityConfig,
) -> Result<ExplanationReport, MetricError> {
    let runtime = runtime_correlation(explanation, plan)?;
    let spearman_cardinality = cardinality_correlation(explanation, plan)?;
    let fid = fidelity(model, plan, explanation, config)?;
    let actual = plan.actual_total_runtime_ms();
    Ok(ExplanationReport {
        plan_id: plan.plan_id().to_string(),
        algorithm: explanation.algorithm,
        ranking: node_ranking(explanation),
        runtime_fractions: runtime.runtime_fractions,
        importance_fractions: runtime.importance_fractions,
        spearman_runtime: runtime.spearman_runtime,
        spearman_cardinality,
        fidelity_plus: fid.fidelity_plus,
        fidelity_minus_quality: fid.fidelity_minus_quality,
        characterization: characterization_score(fid.fidelity_plus, fid.fidelity_minus_quality),
        predicted_runtime_ms: explanation.prediction_ms,
        actual_runtime_ms: actual,
        q_error: q_error(explanation.prediction_ms, actual)?,
    })
}

//! Node-importance explainers for regression models over plan graphs.
//!
//! Each explainer maps `(model, plan)` to one non-negative raw score per node.
//! Raw scores are normalized to fractions summing to one; a max-scaled view
//! (largest score = 1) is kept alongside for display.

mod diff_mask;
mod gnn_explainer;
mod gradient;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, NodeModel};
use crate::plan::{NodeId, NodeKind, PlanGraph};

pub use diff_mask::{explain_diff_mask, relative_change};
pub use gnn_explainer::{explain_gnn_explainer, GnnExplainerConfig};
pub use gradient::{explain_guided_backprop, explain_sensitivity};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("model does not expose input gradients for node {0}")]
    Capability(NodeId),
    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        loss_curve: Vec<f64>,
    },
}

impl ExplainError {
    pub fn is_numerical(&self) -> bool {
        match self {
            ExplainError::Numerical { .. } => true,
            ExplainError::Model(m) => m.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sensitivity,
    GuidedBackprop,
    GnnExplainer,
    DiffMask,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Sensitivity,
        Algorithm::GuidedBackprop,
        Algorithm::GnnExplainer,
        Algorithm::DiffMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Sensitivity => "sensitivity",
            Algorithm::GuidedBackprop => "guided_backprop",
            Algorithm::GnnExplainer => "gnn_explainer",
            Algorithm::DiffMask => "diff_mask",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|a| a.as_str()).collect()
    }

    pub fn is_seeded(self) -> bool {
        self == Algorithm::GnnExplainer
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown algorithm {given:?}; valid algorithms: {}", Algorithm::names().join(", "))]
pub struct UnknownAlgorithm {
    pub given: String,
}

impl FromStr for Algorithm {
    type Err = UnknownAlgorithm;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| UnknownAlgorithm {
                given: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node_id: NodeId,
    pub kind: NodeKind,
    pub label: String,
    pub raw: f64,
    pub normalized: f64,
    pub max_scaled: f64,
}

impl NodeScore {
    /// Runtime correlation only applies to operators.
    pub fn has_runtime(&self) -> bool {
        self.kind == NodeKind::Operator
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub elapsed_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_curve: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub algorithm: Algorithm,
    pub plan_id: String,
    pub prediction_ms: f64,
    pub scores: Vec<NodeScore>,
    pub diagnostics: Diagnostics,
}

impl Explanation {
    /// Assembles an explanation from raw scores given in plan node order.
    pub fn from_raw(
        algorithm: Algorithm,
        plan: &PlanGraph,
        prediction_ms: f64,
        raw: Vec<f64>,
        diagnostics: Diagnostics,
    ) -> Result<Self, ExplainError> {
        if raw.len() != plan.len() {
            return Err(ExplainError::Contract(format!(
                "{} scores for {} nodes",
                raw.len(),
                plan.len()
            )));
        }
        let normalized = normalize_scores(&raw)?;
        let max_scaled = max_scale(&raw);
        let scores = plan
            .nodes()
            .iter()
            .zip(raw)
            .zip(normalized.into_iter().zip(max_scaled))
            .map(|((n, raw), (normalized, max_scaled))| NodeScore {
                node_id: n.id,
                kind: n.kind,
                label: n.label.clone(),
                raw,
                normalized,
                max_scaled,
            })
            .collect();
        Ok(Self {
            algorithm,
            plan_id: plan.plan_id().to_string(),
            prediction_ms,
            scores,
            diagnostics,
        })
    }

    pub fn score(&self, id: NodeId) -> Option<&NodeScore> {
        self.scores.iter().find(|s| s.node_id == id)
    }

    pub fn raw_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.raw).collect()
    }

    pub fn normalized_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.normalized).collect()
    }

    /// Checks that the explanation scores exactly the nodes of `plan`.
    pub fn covers(&self, plan: &PlanGraph) -> bool {
        self.scores.len() == plan.len()
            && self
                .scores
                .iter()
                .all(|s| plan.position(s.node_id).is_some())
            && {
                let mut ids: Vec<NodeId> = self.scores.iter().map(|s| s.node_id).collect();
                ids.sort_unstable();
                ids.windows(2).all(|w| w[0] != w[1])
            }
    }
}

/// Fractions of the total; all-zero input maps to the uniform distribution.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>, ExplainError> {
    if let Some(bad) = raw.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(ExplainError::Contract(format!(
            "raw score {bad} is negative or not finite"
        )));
    }
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        Ok(raw.iter().map(|v| v / total).collect())
    } else {
        Ok(vec![1.0 / raw.len() as f64; raw.len()])
    }
}

/// Display view where the largest score is 1; all-zero stays zero.
pub fn max_scale(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        raw.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Settings for every explainer; only the GNNExplainer uses any today.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExplainConfig {
    #[serde(default)]
    pub gnn_explainer: GnnExplainerConfig,
}

pub fn explain(
    model: &dyn NodeModel,
    plan: &PlanGraph,
    algorithm: Algorithm,
    config: &ExplainConfig,
) -> Result<Explanation, ExplainError> {
    match algorithm {
        Algorithm::Sensitivity => explain_sensitivity(model, plan),
        Algorithm::GuidedBackprop => explain_guided_backprop(model, plan),
        Algorithm::GnnExplainer => explain_gnn_explainer(model, plan, &config.gnn_explainer),
        Algorithm::DiffMask => explain_diff_mask(model, plan),
    }
}

pub(crate) fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

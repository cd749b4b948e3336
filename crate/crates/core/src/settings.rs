//! User-facing explainer settings, shared by the command line and the service.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::explain::{
    explain, Algorithm, ExplainConfig, ExplainError, Explanation, GnnExplainerConfig,
};
use crate::metrics::{build_report, ExplanationReport, FidelityConfig, MetricError};
use crate::model::NodeModel;
use crate::plan::PlanGraph;

/// Optional overrides; anything left unset takes its default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub lambda_sparsity: Option<f64>,
    pub lambda_entropy: Option<f64>,
    pub seed: Option<u64>,
    pub k_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSettings {
    pub explain: ExplainConfig,
    pub fidelity: FidelityConfig,
}

#[derive(Debug, Error)]
#[error("invalid explainer settings: {0}")]
pub struct SettingsError(pub String);

/// Seed used when none is given: stable per `(plan_id, algorithm)`.
pub fn default_seed(plan_id: &str, algorithm: Algorithm) -> u64 {
    let mut h = Sha256::new();
    h.update(plan_id.as_bytes());
    h.update([0]);
    h.update(algorithm.as_str().as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl ExplainSettings {
    /// Parses `KEY=VALUE` pairs such as `steps=50` or `k_fraction=0.2`.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[S]) -> Result<Self, SettingsError> {
        let mut map = serde_json::Map::new();
        for pair in pairs {
            let pair = pair.as_ref();
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| SettingsError(format!("expected KEY=VALUE, got {pair:?}")))?;
            let number = if let Ok(v) = value.parse::<u64>() {
                serde_json::Value::from(v)
            } else if let Ok(v) = value.parse::<f64>() {
                serde_json::Number::from_f64(v)
                    .map(serde_json::Value::Number)
                    .ok_or_else(|| SettingsError(format!("{key} must be finite")))?
            } else {
                return Err(SettingsError(format!("{key}={value:?} is not a number")));
            };
            map.insert(key.to_string(), number);
        }
        Self::from_json(serde_json::Value::Object(map))
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, SettingsError> {
        serde_json::from_value(value).map_err(|e| SettingsError(e.to_string()))
    }

    /// Fills defaults and validates ranges.
    pub fn resolve(
        &self,
        plan_id: &str,
        algorithm: Algorithm,
    ) -> Result<ResolvedSettings, SettingsError> {
        let d = GnnExplainerConfig::default();
        let gnn = GnnExplainerConfig {
            steps: self.steps.unwrap_or(d.steps),
            lr: self.lr.unwrap_or(d.lr),
            lambda_sparsity: self.lambda_sparsity.unwrap_or(d.lambda_sparsity),
            lambda_entropy: self.lambda_entropy.unwrap_or(d.lambda_entropy),
            seed: self
                .seed
                .unwrap_or_else(|| default_seed(plan_id, algorithm)),
        };
        if !(gnn.lr.is_finite() && gnn.lr > 0.0) {
            return Err(SettingsError(format!(
                "lr must be positive, got {}",
                gnn.lr
            )));
        }
        for (name, v) in [
            ("lambda_sparsity", gnn.lambda_sparsity),
            ("lambda_entropy", gnn.lambda_entropy),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SettingsError(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        let fidelity = FidelityConfig {
            k_fraction: self
                .k_fraction
                .unwrap_or(FidelityConfig::default().k_fraction),
        };
        fidelity.k(1).map_err(|e| SettingsError(e.to_string()))?;
        Ok(ResolvedSettings {
            explain: ExplainConfig { gnn_explainer: gnn },
            fidelity,
        })
    }
}

impl ResolvedSettings {
    /// The part of the settings that can change the result of `algorithm`.
    pub fn relevant_to(&self, algorithm: Algorithm) -> serde_json::Value {
        if algorithm == Algorithm::GnnExplainer {
            serde_json::to_value(self).expect("settings serialize")
        } else {
            serde_json::json!({ "fidelity": self.fidelity })
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl AnalysisError {
    pub fn is_numerical(&self) -> bool {
        match self {
            AnalysisError::Explain(e) => e.is_numerical(),
            AnalysisError::Metric(MetricError::Model(m)) => m.is_numerical(),
            AnalysisError::Metric(_) => false,
        }
    }

    pub fn loss_curve(&self) -> Option<&[f64]> {
        match self {
            AnalysisError::Explain(ExplainError::Numerical { loss_curve, .. }) => Some(loss_curve),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub explanation: Explanation,
    pub report: ExplanationReport,
}

/// Runs one explainer and scores the explanation.
pub fn analyze(
    model: &dyn NodeModel,
    plan: &PlanGraph,
    algorithm: Algorithm,
    settings: &ResolvedSettings,
) -> Result<Analysis, AnalysisError> {
    let explanation = explain(model, plan, algorithm, &settings.explain)?;
    let report = build_report(model, plan, &explanation, &settings.fidelity)?;
    Ok(Analysis {
        explanation,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_parse_into_overrides() {
        let s = ExplainSettings::from_pairs(&["steps=50", "lr=0.1", "seed=3", "k_fraction=0.5"])
            .unwrap();
        assert_eq!(s.steps, Some(50));
        assert_eq!(s.lr, Some(0.1));
        assert_eq!(s.seed, Some(3));
        let r = s.resolve("p", Algorithm::GnnExplainer).unwrap();
        assert_eq!(r.explain.gnn_explainer.steps, 50);
        assert_eq!(r.fidelity.k_fraction, 0.5);
    }

    #[test]
    fn bad_pairs_are_rejected() {
        assert!(ExplainSettings::from_pairs(&["steps"]).is_err());
        assert!(ExplainSettings::from_pairs(&["bogus=1"]).is_err());
        assert!(ExplainSettings::from_pairs(&["steps=abc"]).is_err());
        assert!(ExplainSettings::from_pairs(&["steps=1.5"]).is_err());
        let s = ExplainSettings::from_pairs(&["lr=0"]).unwrap();
        assert!(s.resolve("p", Algorithm::GnnExplainer).is_err());
        let s = ExplainSettings::from_pairs(&["k_fraction=0.9"]).unwrap();
        assert!(s.resolve("p", Algorithm::DiffMask).is_err());
    }

    #[test]
    fn default_seed_depends_on_plan_and_algorithm() {
        let a = default_seed("p1", Algorithm::GnnExplainer);
        assert_eq!(a, default_seed("p1", Algorithm::GnnExplainer));
        assert_ne!(a, default_seed("p2", Algorithm::GnnExplainer));
        assert_ne!(a, default_seed("p1", Algorithm::DiffMask));
    }

    #[test]
    fn seed_only_matters_for_gnn_explainer() {
        let a = ExplainSettings {
            seed: Some(1),
            ..Default::default()
        };
        let b = ExplainSettings {
            seed: Some(2),
            ..Default::default()
        };
        let key = |s: &ExplainSettings, alg| s.resolve("p", alg).unwrap().relevant_to(alg);
        assert_eq!(key(&a, Algorithm::DiffMask), key(&b, Algorithm::DiffMask));
        assert_ne!(
            key(&a, Algorithm::GnnExplainer),
            key(&b, Algorithm::GnnExplainer)
        );
    }
}

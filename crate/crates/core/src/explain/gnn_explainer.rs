use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Axis, BackwardMode, Tape, Var};
use crate::model::{ForwardInputs, MaskInput, ModelError, NodeModel};
use crate::optim::Adam;
use crate::plan::PlanGraph;
use crate::rng::seeded;
use crate::tensor::{Tensor, TensorError};

use super::{elapsed_ms, Algorithm, Diagnostics, ExplainError, Explanation};

const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnExplainerConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_sparsity: f64,
    pub lambda_entropy: f64,
    pub seed: u64,
}

impl Default for GnnExplainerConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            lambda_sparsity: 0.05,
            lambda_entropy: 0.1,
            seed: 0,
        }
    }
}

impl GnnExplainerConfig {
    fn validate(&self) -> Result<(), ExplainError> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && [self.lambda_sparsity, self.lambda_entropy]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(ExplainError::Contract(format!(
                "gnn_explainer needs lr > 0 and non-negative finite penalties, got {self:?}"
            )))
        }
    }
}

/// Records the mask objective for logits `theta`; returns the loss variable.
fn record_loss(
    tape: &mut Tape,
    model: &dyn NodeModel,
    plan: &PlanGraph,
    theta: &[Var],
    base: f64,
    config: &GnnExplainerConfig,
) -> Result<Var, ModelError> {
    let mut masks = Vec::with_capacity(theta.len());
    let mut entropies = Vec::with_capacity(theta.len());
    for &t in theta {
        let m = tape.sigmoid(t)?;
        // 1 − m as sigmoid(−θ) keeps precision when m is close to one.
        let neg = tape.scale(t, -1.0)?;
        let rest = tape.sigmoid(neg)?;
        let ln_m = tape.ln(m)?;
        let ln_rest = tape.ln(rest)?;
        let a = tape.mul(m, ln_m)?;
        let b = tape.mul(rest, ln_rest)?;
        let sum = tape.add(a, b)?;
        entropies.push(tape.scale(sum, -1.0)?);
        masks.push(m);
    }
    let rec = model.record_forward(
        tape,
        plan,
        &ForwardInputs {
            features_require_grad: false,
            mask: MaskInput::Vars(&masks),
        },
    )?;
    let target = tape.constant(Tensor::scalar(base));
    let diff = tape.sub(rec.prediction, target)?;
    let diff = tape.abs(diff)?;
    let relative = tape.scale(diff, 1.0 / base)?;

    let stacked = tape.concat(&masks, Axis::Rows)?;
    let sparsity = tape.mean_rows(stacked)?;
    let sparsity = tape.scale(sparsity, config.lambda_sparsity)?;
    let stacked = tape.concat(&entropies, Axis::Rows)?;
    let entropy = tape.mean_rows(stacked)?;
    let entropy = tape.scale(entropy, config.lambda_entropy)?;

    let loss = tape.add(relative, sparsity)?;
    Ok(tape.add(loss, entropy)?)
}

/// Learns a soft node mask that keeps the prediction while staying sparse.
///
/// Raw scores are the final mask values `sigmoid(θ_i)`.
pub fn explain_gnn_explainer(
    model: &dyn NodeModel,
    plan: &PlanGraph,
    config: &GnnExplainerConfig,
) -> Result<Explanation, ExplainError> {
    config.validate()?;
    let start = Instant::now();
    let base = model.masked_prediction(plan, None)?;
    if !(base.is_finite() && base > 0.0) {
        return Err(ExplainError::Numerical {
            message: format!("unmasked prediction {base} is not a positive finite value"),
            loss_curve: Vec::new(),
        });
    }

    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = seeded(config.seed);
    let mut logits: Vec<Tensor> = (0..plan.len())
        .map(|_| Tensor::scalar(normal.sample(&mut rng)))
        .collect();
    let mut adam = Adam::new(config.lr);
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let numerical = |curve: &Vec<f64>, what: String| ExplainError::Numerical {
            message: format!("step {step}: {what}"),
            loss_curve: curve.clone(),
        };
        let mut tape = Tape::new();
        let theta: Vec<Var> = logits.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = match record_loss(&mut tape, model, plan, &theta, base, config) {
            Ok(l) => l,
            Err(e) if e.is_numerical() => return Err(numerical(&curve, e.to_string())),
            Err(e) => return Err(e.into()),
        };
        let value = tape.value(loss).item().map_err(ModelError::from)?;
        if !value.is_finite() {
            return Err(numerical(&curve, format!("loss is {value}")));
        }
        curve.push(value);
        let grads = tape
            .backward(loss, BackwardMode::Standard)
            .map_err(|e| numerical(&curve, e.to_string()))?;
        let grad_list: Vec<Tensor> = theta.iter().map(|v| grads.get_or_zeros(*v)).collect();
        adam.step(&mut logits, &grad_list).map_err(|e| match e {
            TensorError::NonFinite { .. } => numerical(&curve, e.to_string()),
            other => ExplainError::Model(other.into()),
        })?;
    }

    let raw = logits.iter().map(|t| sigmoid(t.data()[0])).collect();
    Explanation::from_raw(
        Algorithm::GnnExplainer,
        plan,
        base,
        raw,
        Diagnostics {
            elapsed_ms: elapsed_ms(start),
            seed: Some(config.seed),
            loss_curve: Some(curve),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructed::PlantedModel;
    use crate::model::CostModel;
    use crate::plan::fixtures::join_plan;

    #[test]
    fn zero_steps_keeps_initial_masks() {
        let plan = join_plan();
        let cfg = GnnExplainerConfig {
            steps: 0,
            seed: 4,
            ..Default::default()
        };
        let e = explain_gnn_explainer(&CostModel::with_seed(0), &plan, &cfg).unwrap();
        let u = 1.0 / plan.len() as f64;
        for s in &e.scores {
            assert!((s.raw - 0.5).abs() < 0.1);
            assert!((s.normalized - u).abs() < 0.02);
        }
        assert_eq!(e.diagnostics.loss_curve.as_deref(), Some(&[][..]));
    }

    #[test]
    fn same_seed_same_masks() {
        let plan = join_plan();
        let model = CostModel::with_seed(1);
        let cfg = GnnExplainerConfig {
            steps: 20,
            seed: 9,
            ..Default::default()
        };
        let a = explain_gnn_explainer(&model, &plan, &cfg).unwrap();
        let b = explain_gnn_explainer(&model, &plan, &cfg).unwrap();
        assert_eq!(a.raw_scores(), b.raw_scores());
        assert_eq!(a.diagnostics.loss_curve, b.diagnostics.loss_curve);
    }

    #[test]
    fn recovers_planted_node() {
        let plan = join_plan();
        for target in [1, 4, 9, 10] {
            let model = PlantedModel::new(target as u64, target);
            let e = explain_gnn_explainer(&model, &plan, &GnnExplainerConfig::default()).unwrap();
            let best = e
                .scores
                .iter()
                .max_by(|a, b| a.raw.total_cmp(&b.raw))
                .unwrap();
            assert_eq!(best.node_id, target);
            let curve = e.diagnostics.loss_curve.unwrap();
            assert_eq!(curve.len(), 200);
            assert!(curve.last().unwrap() < curve.first().unwrap());
        }
    }

    #[test]
    fn invalid_learning_rate_is_rejected() {
        let cfg = GnnExplainerConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            explain_gnn_explainer(&CostModel::with_seed(0), &join_plan(), &cfg),
            Err(ExplainError::Contract(_))
        ));
    }
}

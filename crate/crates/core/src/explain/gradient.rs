use std::time::Instant;

use crate::autodiff::{BackwardMode, Tape};
use crate::model::{ForwardInputs, ModelError, NodeModel};
use crate::plan::PlanGraph;

use super::{elapsed_ms, Algorithm, Diagnostics, ExplainError, Explanation};

/// L2 norm of the prediction's gradient w.r.t. each node's input features.
pub fn explain_sensitivity(
    model: &dyn NodeModel,
    plan: &PlanGraph,
) -> Result<Explanation, ExplainError> {
    gradient_explanation(model, plan, BackwardMode::Standard, Algorithm::Sensitivity)
}

/// As [`explain_sensitivity`], with negative gradients clamped at every rectifier.
pub fn explain_guided_backprop(
    model: &dyn NodeModel,
    plan: &PlanGraph,
) -> Result<Explanation, ExplainError> {
    gradient_explanation(model, plan, BackwardMode::Guided, Algorithm::GuidedBackprop)
}

fn gradient_explanation(
    model: &dyn NodeModel,
    plan: &PlanGraph,
    mode: BackwardMode,
    algorithm: Algorithm,
) -> Result<Explanation, ExplainError> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let rec = model.record_forward(
        &mut tape,
        plan,
        &ForwardInputs {
            features_require_grad: true,
            ..Default::default()
        },
    )?;
    let prediction = tape
        .value(rec.prediction)
        .item()
        .map_err(ModelError::from)?;
    let grads = tape
        .backward(rec.prediction, mode)
        .map_err(ModelError::from)?;
    let mut raw = Vec::with_capacity(plan.len());
    for (node, var) in plan.nodes().iter().zip(&rec.features) {
        if !tape.requires_grad(*var) {
            return Err(ExplainError::Capability(node.id));
        }
        raw.push(grads.get_or_zeros(*var).norm_l2());
    }
    Explanation::from_raw(
        algorithm,
        plan,
        prediction,
        raw,
        Diagnostics {
            elapsed_ms: elapsed_ms(start),
            ..Default::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructed::LinearSurrogate;
    use crate::model::CostModel;
    use crate::plan::fixtures::join_plan;
    use crate::tensor::Tensor;

    fn model_with(transform: impl Fn(&str, &Tensor) -> Tensor) -> CostModel {
        CostModel::with_seed(4).map_parameters(transform).unwrap()
    }

    #[test]
    fn zero_readout_gives_uniform_scores() {
        let model = model_with(|name, t| {
            if name.starts_with("readout") {
                Tensor::zeros(t.rows(), t.cols())
            } else {
                t.clone()
            }
        });
        let plan = join_plan();
        for e in [
            explain_sensitivity(&model, &plan).unwrap(),
            explain_guided_backprop(&model, &plan).unwrap(),
        ] {
            assert!(e.scores.iter().all(|s| s.raw == 0.0));
            let u = 1.0 / plan.len() as f64;
            assert!(e.scores.iter().all(|s| (s.normalized - u).abs() < 1e-15));
        }
    }

    #[test]
    fn single_node_plan_scores_one() {
        let nodes = vec![crate::plan::fixtures::op(1, "Seq Scan", 2.0, 10.0, &[])];
        let plan = PlanGraph::new("one", "", nodes, 1, 2.0, None).unwrap();
        let e = explain_sensitivity(&CostModel::with_seed(1), &plan).unwrap();
        assert_eq!(e.normalized_scores(), vec![1.0]);
    }

    #[test]
    fn linear_surrogate_scores_are_weight_norms() {
        let plan = join_plan();
        let model = LinearSurrogate::seeded(21);
        let e = explain_sensitivity(&model, &plan).unwrap();
        for (node, score) in plan.nodes().iter().zip(&e.scores) {
            let expect: f64 = model
                .weights(node.kind)
                .iter()
                .map(|w| w * w)
                .sum::<f64>()
                .sqrt();
            assert!(
                (score.raw - expect).abs() < 1e-12,
                "{} vs {expect}",
                score.raw
            );
        }
    }

    #[test]
    fn scaling_one_nodes_features_leaves_others_unchanged_in_linear_model() {
        let plan = join_plan();
        let mut nodes = plan.nodes().to_vec();
        for v in nodes[3].features.values_mut() {
            *v *= 7.5;
        }
        let scaled = PlanGraph::new(
            "s",
            "",
            nodes,
            plan.root(),
            plan.actual_total_runtime_ms(),
            None,
        )
        .unwrap();
        let model = LinearSurrogate::seeded(2);
        let a = explain_sensitivity(&model, &plan).unwrap();
        let b = explain_sensitivity(&model, &scaled).unwrap();
        for (i, (x, y)) in a.scores.iter().zip(&b.scores).enumerate() {
            if i != 3 {
                assert_eq!(x.raw, y.raw);
            }
        }
    }

    #[test]
    fn guided_matches_standard_on_non_negative_network() {
        let model = model_with(|_, t| t.map(|v| 0.2 * v.abs()));
        let plan = join_plan();
        let s = explain_sensitivity(&model, &plan).unwrap();
        let g = explain_guided_backprop(&model, &plan).unwrap();
        for (a, b) in s.scores.iter().zip(&g.scores) {
            assert!((a.raw - b.raw).abs() <= 1e-9 * a.raw.abs().max(1.0));
        }
    }

    #[test]
    fn negative_upstream_gradient_is_clamped_to_zero() {
        // Readout output weights negative: every rectifier sees a negative upstream gradient.
        let model = model_with(|name, t| {
            if name == "readout.1.weight" {
                t.map(|v| -0.2 * v.abs())
            } else {
                t.map(|v| 0.2 * v.abs())
            }
        });
        let plan = join_plan();
        let g = explain_guided_backprop(&model, &plan).unwrap();
        assert!(g.scores.iter().all(|s| s.raw == 0.0));
        let s = explain_sensitivity(&model, &plan).unwrap();
        assert!(s.scores.iter().all(|s| s.raw > 0.0));
    }
}

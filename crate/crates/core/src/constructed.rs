//! Small hand-built models with known answers, for checking explainers.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::features::{featurize, FeatureSchema};
use crate::model::{ForwardInputs, MaskInput, ModelError, NodeModel, RecordedForward};
use crate::plan::{NodeId, NodeKind, PlanGraph};
use crate::rng::seeded;
use crate::tensor::Tensor;

fn feature_vars(tape: &mut Tape, rows: Vec<Tensor>, requires_grad: bool) -> Vec<Var> {
    rows.into_iter()
        .map(|r| {
            if requires_grad {
                tape.leaf(r)
            } else {
                tape.constant(r)
            }
        })
        .collect()
}

fn apply_mask(
    tape: &mut Tape,
    h: Var,
    mask: &MaskInput<'_>,
    pos: usize,
) -> Result<Var, ModelError> {
    Ok(match mask {
        MaskInput::None => h,
        MaskInput::Factors(f) => {
            let factor = tape.constant(Tensor::scalar(f[pos]));
            tape.scale_rows(h, factor)?
        }
        MaskInput::Vars(v) => tape.scale_rows(h, v[pos])?,
    })
}

fn check_mask(mask: &MaskInput<'_>, n: usize) -> Result<(), ModelError> {
    let len = match mask {
        MaskInput::None => n,
        MaskInput::Factors(f) => f.len(),
        MaskInput::Vars(v) => v.len(),
    };
    if len != n {
        return Err(ModelError::Contract(format!(
            "{len} mask entries for {n} nodes"
        )));
    }
    Ok(())
}

/// `ŷ = bias + Σ_i m_i · (w_kind(i) · x_i)`: a model linear in every node's features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    schema: FeatureSchema,
    weights: [Vec<f64>; 4],
    bias: f64,
}

impl LinearSurrogate {
    pub fn new(
        schema: FeatureSchema,
        weights: [Vec<f64>; 4],
        bias: f64,
    ) -> Result<Self, ModelError> {
        for kind in NodeKind::ALL {
            if weights[kind.index()].len() != schema.width(kind) {
                return Err(ModelError::Contract(format!(
                    "weight width mismatch for {}",
                    kind.as_str()
                )));
            }
        }
        Ok(Self {
            schema,
            weights,
            bias,
        })
    }

    /// Positive weights drawn uniformly from `[0.1, 1)` and a unit bias.
    pub fn seeded(seed: u64) -> Self {
        let schema = FeatureSchema::default();
        let mut rng = seeded(seed);
        let weights = NodeKind::ALL.map(|k| {
            (0..schema.width(k))
                .map(|_| rng.random_range(0.1..1.0))
                .collect()
        });
        Self {
            schema,
            weights,
            bias: 1.0,
        }
    }

    pub fn weights(&self, kind: NodeKind) -> &[f64] {
        &self.weights[kind.index()]
    }
}

impl NodeModel for LinearSurrogate {
    fn record_forward(
        &self,
        tape: &mut Tape,
        plan: &PlanGraph,
        inputs: &ForwardInputs<'_>,
    ) -> Result<RecordedForward, ModelError> {
        check_mask(&inputs.mask, plan.len())?;
        let rows = featurize(plan, &self.schema)?.rows;
        let features = feature_vars(tape, rows, inputs.features_require_grad);
        let mut total = tape.constant(Tensor::scalar(self.bias));
        let mut hidden = Vec::with_capacity(plan.len());
        for (pos, node) in plan.nodes().iter().enumerate() {
            let w = self.weights(node.kind);
            let w = tape.constant(Tensor::new(w.len(), 1, w.to_vec())?);
            let term = tape.matmul(features[pos], w)?;
            let term = apply_mask(tape, term, &inputs.mask, pos)?;
            total = tape.add(total, term)?;
            hidden.push(term);
        }
        Ok(RecordedForward {
            features,
            hidden,
            prediction: total,
        })
    }
}

/// A model whose prediction depends on exactly one node.
///
/// Every node gets `h_i = m_i · relu(x_i W_kind + c)` with `W ≥ 0`, `c > 0`,
/// but only the target's state reaches the output:
/// `ŷ = exp(base + gain · mean_j h_target,j)`. Masking the target moves `ŷ`
/// by at least `1 − exp(−gain · c)` relative; masking anything else does nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    schema: FeatureSchema,
    target: NodeId,
    weights: [Tensor; 4],
    offset: f64,
    base: f64,
    gain: f64,
}

const PLANTED_WIDTH: usize = 8;

impl PlantedModel {
    pub fn new(seed: u64, target: NodeId) -> Self {
        let schema = FeatureSchema::default();
        let mut rng = seeded(seed);
        let weights = NodeKind::ALL.map(|k| {
            let w = schema.width(k);
            let data = (0..w * PLANTED_WIDTH)
                .map(|_| rng.random_range(0.0..0.5))
                .collect();
            Tensor::new(w, PLANTED_WIDTH, data).expect("shape")
        });
        Self {
            schema,
            target,
            weights,
            offset: 0.5,
            base: 3.0,
            gain: 2.0,
        }
    }

    /// Plants influence at a node of `plan` chosen by `seed`.
    pub fn for_plan(plan: &PlanGraph, seed: u64) -> Self {
        let pos = seeded(seed ^ 0x9e37_79b9_7f4a_7c15).random_range(0..plan.len());
        Self::new(seed, plan.nodes()[pos].id)
    }

    pub fn target(&self) -> NodeId {
        self.target
    }
}

impl NodeModel for PlantedModel {
    fn record_forward(
        &self,
        tape: &mut Tape,
        plan: &PlanGraph,
        inputs: &ForwardInputs<'_>,
    ) -> Result<RecordedForward, ModelError> {
        check_mask(&inputs.mask, plan.len())?;
        let target = plan.position(self.target).ok_or_else(|| {
            ModelError::Contract(format!("planted node {} is not in the plan", self.target))
        })?;
        let rows = featurize(plan, &self.schema)?.rows;
        let features = feature_vars(tape, rows, inputs.features_require_grad);
        let offset = tape.constant(Tensor::filled(1, PLANTED_WIDTH, self.offset));
        let mut hidden = Vec::with_capacity(plan.len());
        for (pos, node) in plan.nodes().iter().enumerate() {
            let w = tape.constant(self.weights[node.kind.index()].clone());
            let h = tape.matmul(features[pos], w)?;
            let h = tape.add(h, offset)?;
            let h = tape.rectifier(h)?;
            hidden.push(apply_mask(tape, h, &inputs.mask, pos)?);
        }
        let averager = tape.constant(Tensor::filled(PLANTED_WIDTH, 1, 1.0 / PLANTED_WIDTH as f64));
        let mean = tape.matmul(hidden[target], averager)?;
        let scaled = tape.scale(mean, self.gain)?;
        let log_pred = tape.offset(scaled, self.base)?;
        let prediction = tape.exp(log_pred)?;
        Ok(RecordedForward {
            features,
            hidden,
            prediction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::fixtures::join_plan;

    #[test]
    fn linear_surrogate_prediction_is_affine_in_masks() {
        let plan = join_plan();
        let model = LinearSurrogate::seeded(3);
        let full = model.masked_prediction(&plan, None).unwrap();
        let none = model
            .masked_prediction(&plan, Some(&vec![0.0; plan.len()]))
            .unwrap();
        assert_eq!(none, 1.0);
        assert!(full > none);
    }

    #[test]
    fn planted_model_ignores_every_other_node() {
        let plan = join_plan();
        let model = PlantedModel::new(5, 9);
        let target = plan.position(9).unwrap();
        let base = model.masked_prediction(&plan, None).unwrap();
        for pos in 0..plan.len() {
            let mut f = vec![1.0; plan.len()];
            f[pos] = 0.0;
            let y = model.masked_prediction(&plan, Some(&f)).unwrap();
            if pos == target {
                assert!((base - y) / base >= 1.0 - (-1.0f64).exp());
            } else {
                assert_eq!(y, base);
            }
        }
    }

    #[test]
    fn planted_target_must_exist() {
        let model = PlantedModel::new(1, 999);
        assert!(matches!(
            model.masked_prediction(&join_plan(), None),
            Err(ModelError::Contract(_))
        ));
    }
}

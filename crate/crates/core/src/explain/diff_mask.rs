use std::time::Instant;

use crate::model::NodeModel;
use crate::plan::PlanGraph;

use super::{elapsed_ms, Algorithm, Diagnostics, ExplainError, Explanation};

/// `|masked − base| / base`.
pub fn relative_change(masked: f64, base: f64) -> f64 {
    (masked - base).abs() / base
}

/// Leave-one-out masking: node `i` scores the relative change in `ŷ` when
/// only its hidden state is zeroed. Costs `n + 1` forward passes.
pub fn explain_diff_mask(
    model: &dyn NodeModel,
    plan: &PlanGraph,
) -> Result<Explanation, ExplainError> {
    let start = Instant::now();
    let base = model.masked_prediction(plan, None)?;
    if !(base.is_finite() && base > 0.0) {
        return Err(ExplainError::Numerical {
            message: format!("unmasked prediction {base} is not a positive finite value"),
            loss_curve: Vec::new(),
        });
    }
    let mut factors = vec![1.0; plan.len()];
    let mut raw = Vec::with_capacity(plan.len());
    for pos in 0..plan.len() {
        factors[pos] = 0.0;
        let masked = model.masked_prediction(plan, Some(&factors))?;
        factors[pos] = 1.0;
        let change = relative_change(masked, base);
        if !change.is_finite() {
            return Err(ExplainError::Numerical {
                message: format!(
                    "masked prediction {masked} for node {}",
                    plan.nodes()[pos].id
                ),
                loss_curve: Vec::new(),
            });
        }
        raw.push(change);
    }
    Explanation::from_raw(
        Algorithm::DiffMask,
        plan,
        base,
        raw,
        Diagnostics {
            elapsed_ms: elapsed_ms(start),
            ..Default::default()
        },
    )
}

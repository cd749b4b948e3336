//! Mini-batch training in log-runtime space.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, BackwardMode, Tape};
use crate::features::FeaturizedPlan;
use crate::metrics::{q_error, quantile};
use crate::model::{
    CostModel, EpochMetrics, ForwardInputs, ModelError, TargetScaling, TrainingMetadata,
};
use crate::optim::Adam;
use crate::plan::PlanGraph;
use crate::rng::stream_rng;
use crate::tensor::Tensor;

const SPLIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 16,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Deterministic train/validation split of plan indices.
pub fn split_indices(
    count: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(ModelError::Parameter(format!(
            "validation fraction {validation_fraction} outside [0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let n_val = (validation_fraction * count as f64).round() as usize;
    let validation = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    if train.is_empty() || validation.is_empty() {
        return Err(ModelError::Parameter(format!(
            "split of {count} plans leaves {} training and {} validation plans",
            train.len(),
            validation.len()
        )));
    }
    Ok((train, validation))
}

fn q_errors(
    model: &CostModel,
    plans: &[&PlanGraph],
    features: &[&FeaturizedPlan],
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let params = model.record_params(&mut tape, false);
    let mut out = Vec::with_capacity(plans.len());
    for (plan, feats) in plans.iter().zip(features) {
        let mark = tape.len();
        let (rec, _) =
            model.record_with(&mut tape, &params, plan, feats, &ForwardInputs::default())?;
        let pred = tape.value(rec.prediction).item()?;
        out.push(
            q_error(pred, plan.actual_total_runtime_ms())
                .map_err(|e| ModelError::Contract(e.to_string()))?,
        );
        debug_assert!(tape.len() > mark);
    }
    Ok(out)
}

/// Trains `model` on `plans` and returns the best-validation checkpoint.
///
/// `epochs == 0` returns the input model untouched.
pub fn train(
    model: &CostModel,
    plans: &[PlanGraph],
    workload_id: &str,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<CostModel, ModelError> {
    if plans.is_empty() {
        return Err(ModelError::Parameter("no plans to train on".into()));
    }
    if config.batch_size == 0 || !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(ModelError::Parameter(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let (train_idx, val_idx) = split_indices(plans.len(), config.validation_fraction, config.seed)?;
    if config.epochs == 0 {
        return Ok(model.clone());
    }

    let features: Vec<FeaturizedPlan> = plans
        .iter()
        .map(|p| model.featurize(p))
        .collect::<Result<_, _>>()?;
    let targets: Vec<f64> = plans
        .iter()
        .map(|p| p.actual_total_runtime_ms().ln())
        .collect();

    let mut current = model.clone();
    let train_targets: Vec<f64> = train_idx.iter().map(|i| targets[*i]).collect();
    let mean = train_targets.iter().sum::<f64>() / train_targets.len() as f64;
    let var = train_targets
        .iter()
        .map(|t| (t - mean).powi(2))
        .sum::<f64>()
        / train_targets.len() as f64;
    let scale = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
    current.set_target_scaling(TargetScaling { shift: mean, scale });

    let val_plans: Vec<&PlanGraph> = val_idx.iter().map(|i| &plans[*i]).collect();
    let val_feats: Vec<&FeaturizedPlan> = val_idx.iter().map(|i| &features[*i]).collect();

    let mut adam = Adam::new(config.learning_rate);
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut order = train_idx.clone();
    let mut best: Option<(f64, CostModel, usize)> = None;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let params = current.record_params(&mut tape, true);
            let mut sq = Vec::with_capacity(batch.len());
            for &i in batch {
                let (_, log_pred) = current.record_with(
                    &mut tape,
                    &params,
                    &plans[i],
                    &features[i],
                    &ForwardInputs::default(),
                )?;
                let target = tape.constant(Tensor::scalar(targets[i]));
                let diff = tape.sub(log_pred, target)?;
                sq.push(tape.mul(diff, diff)?);
            }
            let stacked = tape.concat(&sq, Axis::Rows)?;
            let loss = tape.mean_rows(stacked)?;
            loss_sum += tape.value(loss).item()? * batch.len() as f64;
            let grads = tape.backward(loss, BackwardMode::Standard)?;
            let grad_list: Vec<Tensor> = params
                .vars()
                .iter()
                .map(|v| grads.get_or_zeros(*v))
                .collect();
            let mut values: Vec<Tensor> = current.parameters().into_iter().cloned().collect();
            adam.step(&mut values, &grad_list)?;
            current.set_parameters(values)?;
        }

        let qs = q_errors(&current, &val_plans, &val_feats)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            validation_median_q_error: quantile(&qs, 0.5),
            validation_p95_q_error: quantile(&qs, 0.95),
        };
        progress(&metrics);
        let better = best
            .as_ref()
            .is_none_or(|(q, _, _)| metrics.validation_median_q_error < *q);
        if better {
            best = Some((metrics.validation_median_q_error, current.clone(), epoch));
        }
        history.push(metrics);
    }

    let (_, mut best_model, best_epoch) = best.expect("at least one epoch ran");
    best_model.set_training(Some(TrainingMetadata {
        workload_id: workload_id.to_string(),
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        seed: config.seed,
        best_epoch,
        history,
        validation_plan_ids: val_plans.iter().map(|p| p.plan_id().to_string()).collect(),
    }));
    Ok(best_model)
}

/// Q-errors of `model` on every plan, in input order.
pub fn evaluate(model: &CostModel, plans: &[PlanGraph]) -> Result<Vec<f64>, ModelError> {
    let features: Vec<FeaturizedPlan> = plans
        .iter()
        .map(|p| model.featurize(p))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&PlanGraph> = plans.iter().collect();
    let feats: Vec<&FeaturizedPlan> = features.iter().collect();
    q_errors(model, &refs, &feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_workload, Complexity};

    #[test]
    fn zero_epochs_is_a_no_op() {
        let w = generate_workload(1, 20, Complexity::default()).unwrap();
        let model = CostModel::with_seed(2);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&model, &w.plans, &w.workload_id, &cfg, |_| {}).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn empty_split_is_a_parameter_error() {
        let w = generate_workload(1, 2, Complexity::default()).unwrap();
        let model = CostModel::with_seed(2);
        let cfg = TrainConfig {
            validation_fraction: 0.1,
            ..Default::default()
        };
        assert!(matches!(
            train(&model, &w.plans, "w", &cfg, |_| {}),
            Err(ModelError::Parameter(_))
        ));
        assert!(matches!(
            train(&model, &[], "w", &cfg, |_| {}),
            Err(ModelError::Parameter(_))
        ));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(100, 0.2, 4).unwrap();
        let (c, d) = split_indices(100, 0.2, 4).unwrap();
        assert_eq!((a.clone(), b.clone()), (c, d));
        assert_eq!(b.len(), 20);
        assert!(a.iter().all(|i| !b.contains(i)));
    }

    #[test]
    fn short_training_reduces_loss_and_records_history() {
        let w = generate_workload(3, 60, Complexity::default()).unwrap();
        let model = CostModel::with_seed(0);
        let cfg = TrainConfig {
            epochs: 8,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let mut seen = Vec::new();
        let out = train(&model, &w.plans, &w.workload_id, &cfg, |m| {
            seen.push(m.train_loss)
        })
        .unwrap();
        let meta = out.training().unwrap();
        assert_eq!(meta.history.len(), 8);
        assert_eq!(meta.validation_plan_ids.len(), 12);
        assert!(seen.last().unwrap() < seen.first().unwrap());
        let best = &meta.history[meta.best_epoch - 1];
        assert!(meta
            .history
            .iter()
            .all(|h| h.validation_median_q_error >= best.validation_median_q_error));
    }
}

use std::collections::HashSet;

use anyhow::Context;
use planlens_core::explain::Algorithm;
use planlens_core::plan::{NodeId, PlanGraph};
use planlens_core::settings::analyze;
use serde::Serialize;

use crate::{
    analysis_kind, load_model, load_workload, parse_settings, BenchArgs, Classify, Failure, Kind,
    Progress,
};

/// One CSV row. Timing is left out so reruns produce identical files.
#[derive(Debug, Serialize)]
struct Row<'a> {
    plan_id: &'a str,
    algorithm: &'static str,
    node_count: usize,
    operator_count: usize,
    predicted_ms: f64,
    actual_ms: f64,
    q_error: f64,
    top_node: NodeId,
    fidelity_plus: f64,
    fidelity_minus_quality: f64,
    characterization: f64,
    spearman_runtime: Option<f64>,
    spearman_cardinality: Option<f64>,
}

pub(crate) fn run(args: BenchArgs, progress: &Progress) -> Result<(), Failure> {
    let settings = parse_settings(&args.config)?;
    let model = load_model(&args.model)?;
    let workload = load_workload(&args.workload)?;

    let mut plans: Vec<&PlanGraph> = workload.plans.iter().collect();
    if args.held_out {
        let meta = model
            .training()
            .filter(|m| m.workload_id == workload.workload_id)
            .context("--held-out needs a model trained on this workload")
            .kind(Kind::Usage)?;
        let held: HashSet<&str> = meta
            .validation_plan_ids
            .iter()
            .map(String::as_str)
            .collect();
        plans.retain(|p| held.contains(p.plan_id()));
    }
    plans.sort_by(|a, b| a.plan_id().cmp(b.plan_id()));
    let mut algorithms = Algorithm::ALL.to_vec();
    algorithms.sort_by_key(|a| a.as_str());

    let mut writer = csv::Writer::from_path(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .kind(Kind::Data)?;
    for (i, plan) in plans.iter().enumerate() {
        for &algorithm in &algorithms {
            let resolved = settings
                .resolve(plan.plan_id(), algorithm)
                .kind(Kind::Usage)?;
            let a = analyze(&model, plan, algorithm, &resolved).map_err(|e| Failure {
                kind: analysis_kind(&e),
                error: anyhow::Error::new(e).context(format!("{algorithm} on {}", plan.plan_id())),
            })?;
            let r = &a.report;
            writer
                .serialize(Row {
                    plan_id: plan.plan_id(),
                    algorithm: algorithm.as_str(),
                    node_count: plan.len(),
                    operator_count: plan.operator_count(),
                    predicted_ms: r.predicted_runtime_ms,
                    actual_ms: r.actual_runtime_ms,
                    q_error: r.q_error,
                    top_node: r.ranking[0],
                    fidelity_plus: r.fidelity_plus,
                    fidelity_minus_quality: r.fidelity_minus_quality,
                    characterization: r.characterization,
                    spearman_runtime: r.spearman_runtime,
                    spearman_cardinality: r.spearman_cardinality,
                })
                .kind(Kind::Data)?;
        }
        if (i + 1) % 50 == 0 || i + 1 == plans.len() {
            progress.say(format_args!("explained {}/{} plans", i + 1, plans.len()));
        }
    }
    writer.flush().kind(Kind::Data)?;
    progress.say(format_args!(
        "wrote {} rows to {}",
        plans.len() * algorithms.len(),
        args.out.display()
    ));
    Ok(())
}

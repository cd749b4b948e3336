use std::collections::BTreeSet;

use planlens_core::explain::{explain, Algorithm, ExplainConfig, GnnExplainerConfig};
use planlens_core::features::OPERATOR_VOCABULARY;
use planlens_core::model::CostModel;
use planlens_core::plan::{PlanGraph, PlanNode};
use planlens_core::train::{train, TrainConfig};
use planlens_core::workload::{generate_workload, Complexity};

fn with_total(plan: &PlanGraph, total: f64) -> PlanGraph {
    let factor = total / plan.actual_total_runtime_ms();
    let nodes: Vec<PlanNode> = plan
        .nodes()
        .iter()
        .map(|n| PlanNode {
            cumulative_runtime_ms: n.cumulative_runtime_ms.map(|r| r * factor),
            ..n.clone()
        })
        .collect();
    PlanGraph::new(plan.plan_id(), plan.sql(), nodes, plan.root(), total, None).unwrap()
}

#[test]
fn explanations_follow_node_relabeling() {
    let w = generate_workload(4, 5, Complexity::default()).unwrap();
    let model = CostModel::with_seed(6);
    let config = ExplainConfig {
        gnn_explainer: GnnExplainerConfig {
            steps: 25,
            seed: 2,
            ..Default::default()
        },
    };
    for plan in &w.plans {
        let max = plan.nodes().iter().map(|n| n.id).max().unwrap();
        let relabel = |id: u32| 10 * (max + 1 - id);
        let moved = plan.relabeled(relabel).unwrap();
        for alg in Algorithm::ALL {
            let a = explain(&model, plan, alg, &config).unwrap();
            let b = explain(&model, &moved, alg, &config).unwrap();
            for s in &a.scores {
                let t = b.score(relabel(s.node_id)).unwrap();
                assert!(
                    (s.raw - t.raw).abs() <= 1e-12 * s.raw.abs().max(1.0),
                    "{alg}"
                );
            }
        }
    }
}

#[test]
fn constant_runtime_workload_is_learned() {
    let w = generate_workload(12, 200, Complexity::default()).unwrap();
    let plans: Vec<PlanGraph> = w.plans.iter().map(|p| with_total(p, 100.0)).collect();
    let cfg = TrainConfig {
        epochs: 15,
        learning_rate: 3e-3,
        seed: 1,
        ..Default::default()
    };
    let model = train(&CostModel::with_seed(1), &plans, "constant", &cfg, |_| {}).unwrap();
    let held: BTreeSet<&str> = model
        .training()
        .unwrap()
        .validation_plan_ids
        .iter()
        .map(String::as_str)
        .collect();
    for plan in plans.iter().filter(|p| held.contains(p.plan_id())) {
        let y = model.predict(plan, None).unwrap().predicted_runtime_ms;
        assert!(
            (90.0..=110.0).contains(&y),
            "{} predicted {y}",
            plan.plan_id()
        );
    }
}

#[test]
fn larger_scanned_tables_do_not_lower_predictions() {
    let w = generate_workload(9, 400, Complexity::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        learning_rate: 3e-3,
        seed: 2,
        ..Default::default()
    };
    let model = train(
        &CostModel::with_seed(2),
        &w.plans,
        &w.workload_id,
        &cfg,
        |_| {},
    )
    .unwrap();
    let mut sampled = 0;
    let mut monotone = 0;
    for plan in w.plans.iter().take(100) {
        let scan = plan
            .operators()
            .find(|n| n.label.ends_with("Scan"))
            .expect("every plan scans a table");
        let table = scan
            .children
            .iter()
            .map(|c| plan.node(*c).unwrap())
            .find(|n| n.feature("table_rows").is_some())
            .unwrap();
        // Output cardinalities grow with the table along the path to the root,
        // except an ungrouped aggregate, which still emits one row.
        let mut grown = BTreeSet::from([scan.id]);
        loop {
            let before = grown.len();
            for n in plan.nodes() {
                if n.children.iter().any(|c| grown.contains(c)) {
                    grown.insert(n.id);
                }
            }
            if grown.len() == before {
                break;
            }
        }
        let nodes: Vec<PlanNode> = plan
            .nodes()
            .iter()
            .map(|n| {
                let mut n = n.clone();
                if n.id == table.id {
                    *n.features.get_mut("table_rows").unwrap() *= 100.0;
                }
                let single_row =
                    n.label == "Aggregate" && n.feature("actual_cardinality") == Some(1.0);
                if grown.contains(&n.id) && !single_row {
                    for key in ["actual_cardinality", "estimated_cardinality"] {
                        *n.features.get_mut(key).unwrap() *= 100.0;
                    }
                }
                n
            })
            .collect();
        let bigger = PlanGraph::new(
            plan.plan_id(),
            "",
            nodes,
            plan.root(),
            plan.actual_total_runtime_ms(),
            None,
        )
        .unwrap();
        let before = model.predict(plan, None).unwrap().predicted_runtime_ms;
        let after = model.predict(&bigger, None).unwrap().predicted_runtime_ms;
        sampled += 1;
        monotone += usize::from(after >= before);
    }
    println!("{monotone}/{sampled} plans monotone");
    assert!(
        monotone * 10 >= sampled * 9,
        "{monotone}/{sampled} monotone"
    );
}

#[test]
fn generator_covers_every_operator() {
    let w = generate_workload(
        3,
        200,
        Complexity {
            min_joins: 1,
            max_joins: 3,
            tables: 8,
        },
    )
    .unwrap();
    let seen: BTreeSet<&str> = w
        .plans
        .iter()
        .flat_map(|p| p.operators().map(|n| n.label.as_str()))
        .collect();
    for label in OPERATOR_VOCABULARY {
        assert!(seen.contains(label), "{label} never generated");
    }
}

#[test]
fn gnn_explainer_loss_mostly_decreases() {
    // Soft check: logged, only a gross regression fails.
    let w = generate_workload(5, 10, Complexity::default()).unwrap();
    let model = CostModel::with_seed(3);
    let mut steps = 0;
    let mut non_increasing = 0;
    for (i, plan) in w.plans.iter().enumerate() {
        let config = ExplainConfig {
            gnn_explainer: GnnExplainerConfig {
                seed: i as u64,
                ..Default::default()
            },
        };
        let e = explain(&model, plan, Algorithm::GnnExplainer, &config).unwrap();
        let curve = e.diagnostics.loss_curve.unwrap();
        for pair in curve.windows(2) {
            steps += 1;
            non_increasing += usize::from(pair[1] <= pair[0] + 1e-12);
        }
    }
    let share = non_increasing as f64 / steps as f64;
    println!(
        "gnn_explainer loss non-increasing in {:.1}% of steps",
        100.0 * share
    );
    assert!(share >= 0.5, "{share}");
}

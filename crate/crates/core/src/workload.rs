//! Synthetic plan workloads with an additive ground-truth runtime oracle.
//!
//! Cardinalities propagate bottom-up (scan output = table rows × filter
//! selectivity, join output = product of inputs × join selectivity) and every
//! operator's own runtime is a linear function of its input and output rows.
//! A parent's cumulative runtime includes its children's, as in
//! EXPLAIN ANALYZE traces.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::OPERATOR_VOCABULARY;
use crate::plan::{NodeId, NodeKind, PlanError, PlanGraph, PlanNode};
use crate::rng::stream_rng;

pub const MAX_JOINS: u32 = 6;
const MANIFEST: &str = "workload.json";
const SCHEMA_STREAM: u64 = u64::MAX;
const ESTIMATE_ERROR_SIGMA: f64 = 0.2;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("node {0} lacks the cardinality attributes the oracle needs")]
    MissingCardinality(NodeId),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed workload manifest {path}: {message}")]
    Manifest { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorCost {
    pub cost_per_input_row: f64,
    pub cost_per_output_row: f64,
    pub fixed_startup_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCostParams {
    pub operators: BTreeMap<String, OperatorCost>,
    pub noise_fraction: f64,
}

impl Default for OracleCostParams {
    fn default() -> Self {
        let startup = |label: &str| match label {
            "Seq Scan" | "Index Scan" => 0.1,
            "Hash Join" | "Merge Join" | "Nested Loop" => 1.0,
            "Sort" => 0.5,
            _ => 0.2,
        };
        let operators = OPERATOR_VOCABULARY
            .iter()
            .map(|label| {
                (
                    label.to_string(),
                    OperatorCost {
                        cost_per_input_row: 1e-4,
                        cost_per_output_row: 5e-5,
                        fixed_startup_ms: startup(label),
                    },
                )
            })
            .collect();
        Self {
            operators,
            noise_fraction: 0.05,
        }
    }
}

impl OracleCostParams {
    /// Same coefficients for every operator.
    pub fn uniform(cost: OperatorCost, noise_fraction: f64) -> Self {
        Self {
            operators: OPERATOR_VOCABULARY
                .iter()
                .map(|l| (l.to_string(), cost))
                .collect(),
            noise_fraction,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(0.0..=0.5).contains(&self.noise_fraction) {
            return Err(WorkloadError::Parameter(format!(
                "noise_fraction {} outside [0, 0.5]",
                self.noise_fraction
            )));
        }
        for label in OPERATOR_VOCABULARY {
            let Some(c) = self.operators.get(label) else {
                return Err(WorkloadError::Parameter(format!(
                    "no cost entry for {label}"
                )));
            };
            let all = [
                c.cost_per_input_row,
                c.cost_per_output_row,
                c.fixed_startup_ms,
            ];
            if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(WorkloadError::Parameter(format!(
                    "negative or non-finite coefficient for {label}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub min_joins: u32,
    pub max_joins: u32,
    /// Tables in the synthetic schema the plans draw from.
    pub tables: u32,
}

impl Default for Complexity {
    fn default() -> Self {
        Self {
            min_joins: 1,
            max_joins: 3,
            tables: 8,
        }
    }
}

impl Complexity {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.min_joins > self.max_joins || self.max_joins > MAX_JOINS {
            return Err(WorkloadError::Parameter(format!(
                "need 0 <= min_joins <= max_joins <= {MAX_JOINS}, got {}..{}",
                self.min_joins, self.max_joins
            )));
        }
        if self.tables < self.max_joins + 1 {
            return Err(WorkloadError::Parameter(format!(
                "{} joins need at least {} tables, schema has {}",
                self.max_joins,
                self.max_joins + 1,
                self.tables
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub workload_id: String,
    pub seed: u64,
    pub complexity: Complexity,
    pub params: OracleCostParams,
    pub plans: Vec<PlanGraph>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    workload_id: String,
    seed: u64,
    complexity: Complexity,
    params: OracleCostParams,
    plan_ids: Vec<String>,
}

struct SchemaTable {
    name: String,
    rows: f64,
    distinct: Vec<f64>,
}

fn synthetic_schema(seed: u64, tables: u32) -> Vec<SchemaTable> {
    let mut rng = stream_rng(seed, SCHEMA_STREAM);
    (0..tables)
        .map(|t| {
            let rows = 10f64.powf(rng.random_range(3.0..6.5)).round();
            let distinct = (0..4)
                .map(|_| {
                    (rows * 10f64.powf(rng.random_range(-3.0..0.0)))
                        .round()
                        .max(1.0)
                })
                .collect();
            SchemaTable {
                name: format!("t{t}"),
                rows,
                distinct,
            }
        })
        .collect()
}

/// Output of a subtree under construction.
struct Subplan {
    root: NodeId,
    rows: f64,
    tables: Vec<usize>,
}

struct PlanBuilder<'a> {
    schema: &'a [SchemaTable],
    rng: ChaCha8Rng,
    nodes: Vec<PlanNode>,
    columns: HashMap<(usize, usize), NodeId>,
    filters: Vec<String>,
    joins: Vec<String>,
    estimate_noise: Normal<f64>,
}

impl<'a> PlanBuilder<'a> {
    fn push(
        &mut self,
        kind: NodeKind,
        label: &str,
        features: &[(&str, f64)],
        children: Vec<NodeId>,
    ) -> NodeId {
        let id = self.nodes.len() as NodeId + 1;
        self.nodes.push(PlanNode {
            id,
            kind,
            label: label.into(),
            features: features.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            cumulative_runtime_ms: (kind == NodeKind::Operator).then_some(0.0),
            children,
        });
        id
    }

    fn column(&mut self, table: usize, col: usize) -> NodeId {
        if let Some(id) = self.columns.get(&(table, col)) {
            return *id;
        }
        let distinct = self.schema[table].distinct[col];
        let id = self.push(
            NodeKind::Column,
            &format!("{}.c{col}", self.schema[table].name),
            &[("distinct_values", distinct)],
            vec![],
        );
        self.columns.insert((table, col), id);
        id
    }

    fn operator(&mut self, label: &str, output_rows: f64, children: Vec<NodeId>) -> NodeId {
        let estimate = output_rows * self.estimate_noise.sample(&mut self.rng).exp();
        self.push(
            NodeKind::Operator,
            label,
            &[
                ("actual_cardinality", output_rows),
                ("estimated_cardinality", estimate),
            ],
            children,
        )
    }

    fn simple_predicate(&mut self, table: usize) -> (NodeId, f64) {
        let col = self.rng.random_range(0..self.schema[table].distinct.len());
        let column = self.column(table, col);
        let label = *["=", "<", ">", "<=", ">=", "LIKE"]
            .choose(&mut self.rng)
            .unwrap();
        let selectivity = if label == "=" {
            1.0 / self.schema[table].distinct[col]
        } else {
            10f64.powf(self.rng.random_range(-2.0..-0.05))
        };
        self.filters
            .push(format!("{}.c{col} {label} ?", self.schema[table].name));
        let id = self.push(
            NodeKind::Predicate,
            label,
            &[("selectivity", selectivity)],
            vec![column],
        );
        (id, selectivity)
    }

    fn scan(&mut self, table: usize) -> Subplan {
        let t = &self.schema[table];
        let (name, rows) = (t.name.clone(), t.rows);
        let table_node = self.push(NodeKind::Table, &name, &[("table_rows", rows)], vec![]);
        let mut children = vec![table_node];
        let mut selectivity = 1.0;
        if self.rng.random_bool(0.75) {
            let (first, s1) = self.simple_predicate(table);
            let (pred, sel) = if self.rng.random_bool(0.3) {
                let (second, s2) = self.simple_predicate(table);
                if self.rng.random_bool(0.7) {
                    let s = s1 * s2;
                    (
                        self.push(
                            NodeKind::Predicate,
                            "AND",
                            &[("selectivity", s)],
                            vec![first, second],
                        ),
                        s,
                    )
                } else {
                    let s = s1 + s2 - s1 * s2;
                    (
                        self.push(
                            NodeKind::Predicate,
                            "OR",
                            &[("selectivity", s)],
                            vec![first, second],
                        ),
                        s,
                    )
                }
            } else {
                (first, s1)
            };
            children.push(pred);
            selectivity = sel;
        }
        let label = if selectivity < 0.1 && self.rng.random_bool(0.6) {
            "Index Scan"
        } else {
            "Seq Scan"
        };
        let output = rows * selectivity;
        let root = self.operator(label, output, children);
        Subplan {
            root,
            rows: output,
            tables: vec![table],
        }
    }

    fn join(&mut self, left: Subplan, right: Subplan) -> Subplan {
        let lt = *left.tables.choose(&mut self.rng).unwrap();
        let rt = *right.tables.choose(&mut self.rng).unwrap();
        let lc = self.rng.random_range(0..self.schema[lt].distinct.len());
        let rc = self.rng.random_range(0..self.schema[rt].distinct.len());
        let (lcol, rcol) = (self.column(lt, lc), self.column(rt, rc));
        let selectivity = self.rng.random_range(0.5..2.0) / left.rows.max(right.rows).max(1.0);
        let pred = self.push(
            NodeKind::Predicate,
            "=",
            &[("selectivity", selectivity)],
            vec![lcol, rcol],
        );
        self.joins.push(format!(
            "{}.c{lc} = {}.c{rt_c}",
            self.schema[lt].name,
            self.schema[rt].name,
            rt_c = rc
        ));
        let label = *["Hash Join", "Merge Join", "Nested Loop"]
            .choose(&mut self.rng)
            .unwrap();
        let output = left.rows * right.rows * selectivity;
        let root = self.operator(label, output, vec![left.root, right.root, pred]);
        let mut tables = left.tables;
        tables.extend(right.tables);
        Subplan {
            root,
            rows: output,
            tables,
        }
    }
}

fn build_plan(
    plan_id: String,
    schema: &[SchemaTable],
    complexity: &Complexity,
    params: &OracleCostParams,
    mut rng: ChaCha8Rng,
) -> Result<PlanGraph, WorkloadError> {
    let joins = rng.random_range(complexity.min_joins..=complexity.max_joins) as usize;
    let mut tables: Vec<usize> = (0..schema.len()).collect();
    let (picked, _) = tables.partial_shuffle(&mut rng, joins + 1);
    let picked = picked.to_vec();

    let mut b = PlanBuilder {
        schema,
        rng,
        nodes: Vec::new(),
        columns: HashMap::new(),
        filters: Vec::new(),
        joins: Vec::new(),
        estimate_noise: Normal::new(0.0, ESTIMATE_ERROR_SIGMA).expect("valid sigma"),
    };
    let mut parts: Vec<Subplan> = picked.iter().map(|t| b.scan(*t)).collect();
    while parts.len() > 1 {
        let i = b.rng.random_range(0..parts.len());
        let left = parts.swap_remove(i);
        let j = b.rng.random_range(0..parts.len());
        let right = parts.swap_remove(j);
        let joined = b.join(left, right);
        parts.push(joined);
    }
    let mut top = parts.pop().expect("at least one scan");
    if b.rng.random_bool(0.35) {
        let root = b.operator("Sort", top.rows, vec![top.root]);
        top.root = root;
    }
    let grouped = b.rng.random_bool(0.5);
    let agg_rows = if grouped {
        (top.rows * 10f64.powf(b.rng.random_range(-3.0..-1.0))).max(1.0)
    } else {
        1.0
    };
    let root = b.operator("Aggregate", agg_rows, vec![top.root]);

    let from: Vec<&str> = picked.iter().map(|t| schema[*t].name.as_str()).collect();
    let mut sql = format!("SELECT COUNT(*) FROM {}", from.join(", "));
    let conds: Vec<&String> = b.joins.iter().chain(b.filters.iter()).collect();
    if !conds.is_empty() {
        sql.push_str(" WHERE ");
        sql.push_str(
            &conds
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" AND "),
        );
    }
    if grouped {
        sql.push_str(&format!(" GROUP BY {}.c0", from[0]));
    }
    sql.push(';');

    let mut nodes = b.nodes;
    let noise_rng = b.rng;
    let total = annotate_runtimes(&mut nodes, root, params, noise_rng)?;
    Ok(PlanGraph::new(plan_id, sql, nodes, root, total, None)?)
}

/// Writes oracle runtimes into `nodes` and returns the root cumulative runtime.
fn annotate_runtimes(
    nodes: &mut [PlanNode],
    root: NodeId,
    params: &OracleCostParams,
    mut rng: ChaCha8Rng,
) -> Result<f64, WorkloadError> {
    let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(p, n)| (n.id, p)).collect();
    let noise = params.noise_fraction;
    let mut isolated: HashMap<NodeId, f64> = HashMap::new();
    for n in nodes.iter().filter(|n| n.is_operator()) {
        let output = n
            .feature("actual_cardinality")
            .ok_or(WorkloadError::MissingCardinality(n.id))?;
        let op_children: Vec<&PlanNode> = n
            .children
            .iter()
            .filter_map(|c| index.get(c).map(|p| &nodes[*p]))
            .filter(|c| c.is_operator())
            .collect();
        let input: f64 = if op_children.is_empty() {
            n.children
                .iter()
                .filter_map(|c| index.get(c).map(|p| &nodes[*p]))
                .filter(|c| c.kind == NodeKind::Table)
                .map(|c| {
                    c.feature("table_rows")
                        .ok_or(WorkloadError::MissingCardinality(c.id))
                })
                .sum::<Result<f64, _>>()?
        } else {
            op_children
                .iter()
                .map(|c| {
                    c.feature("actual_cardinality")
                        .ok_or(WorkloadError::MissingCardinality(c.id))
                })
                .sum::<Result<f64, _>>()?
        };
        let cost = params.operators.get(&n.label).ok_or_else(|| {
            WorkloadError::Parameter(format!("no cost entry for operator {:?}", n.label))
        })?;
        let u = if noise > 0.0 {
            rng.random_range(-noise..=noise)
        } else {
            0.0
        };
        let base = cost.fixed_startup_ms
            + cost.cost_per_input_row * input
            + cost.cost_per_output_row * output;
        isolated.insert(n.id, base * (1.0 + u));
    }

    fn cumulative(
        id: NodeId,
        nodes: &[PlanNode],
        index: &HashMap<NodeId, usize>,
        isolated: &HashMap<NodeId, f64>,
        out: &mut HashMap<NodeId, f64>,
    ) -> f64 {
        let n = &nodes[index[&id]];
        let mut total = isolated[&id];
        for c in &n.children {
            if nodes[index[c]].is_operator() {
                total += cumulative(*c, nodes, index, isolated, out);
            }
        }
        out.insert(id, total);
        total
    }
    if !index.contains_key(&root) || !nodes[index[&root]].is_operator() {
        return Err(WorkloadError::Parameter(format!(
            "root {root} is not an operator"
        )));
    }
    let mut cum = HashMap::new();
    let total = cumulative(root, nodes, &index, &isolated, &mut cum);
    for n in nodes.iter_mut().filter(|n| n.kind == NodeKind::Operator) {
        n.cumulative_runtime_ms = cum.get(&n.id).copied().or(Some(0.0));
    }
    Ok(total)
}

/// Re-annotates `plan` with oracle runtimes drawn from `seed`.
pub fn oracle_runtime(
    plan: &PlanGraph,
    params: &OracleCostParams,
    seed: u64,
) -> Result<PlanGraph, WorkloadError> {
    params.validate()?;
    let mut nodes = plan.nodes().to_vec();
    let total = annotate_runtimes(&mut nodes, plan.root(), params, crate::rng::seeded(seed))?;
    Ok(PlanGraph::new(
        plan.plan_id(),
        plan.sql(),
        nodes,
        plan.root(),
        total,
        plan.predicted_runtime_ms(),
    )?)
}

pub fn generate_workload(
    seed: u64,
    count: usize,
    complexity: Complexity,
) -> Result<Workload, WorkloadError> {
    generate_workload_with(seed, count, complexity, OracleCostParams::default(), None)
}

/// Each plan comes from its own RNG stream, so plan `i` does not depend on `count`.
pub fn generate_workload_with(
    seed: u64,
    count: usize,
    complexity: Complexity,
    params: OracleCostParams,
    workload_id: Option<String>,
) -> Result<Workload, WorkloadError> {
    if count == 0 {
        return Err(WorkloadError::Parameter("count must be at least 1".into()));
    }
    complexity.validate()?;
    params.validate()?;
    let workload_id = workload_id.unwrap_or_else(|| format!("synth-{seed}"));
    let schema = synthetic_schema(seed, complexity.tables);
    let plans = (0..count)
        .map(|i| {
            build_plan(
                format!("{workload_id}-{i:04}"),
                &schema,
                &complexity,
                &params,
                stream_rng(seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Workload {
        workload_id,
        seed,
        complexity,
        params,
        plans,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkloadError + '_ {
    move |source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Workload {
    /// Writes `workload.json` plus one `<plan_id>.json` per plan into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), WorkloadError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for plan in &self.plans {
            let path = dir.join(format!("{}.json", plan.plan_id()));
            let mut text = plan.to_json_pretty();
            text.push('\n');
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        let manifest = Manifest {
            workload_id: self.workload_id.clone(),
            seed: self.seed,
            complexity: self.complexity,
            params: self.params.clone(),
            plan_ids: self.plans.iter().map(|p| p.plan_id().to_string()).collect(),
        };
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, WorkloadError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| WorkloadError::Manifest {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let plans = manifest
            .plan_ids
            .iter()
            .map(|id| {
                let path = dir.join(format!("{id}.json"));
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                Ok(crate::plan::parse_plan(&text)?)
            })
            .collect::<Result<Vec<_>, WorkloadError>>()?;
        Ok(Self {
            workload_id: manifest.workload_id,
            seed: manifest.seed,
            complexity: manifest.complexity,
            params: manifest.params,
            plans,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::isolate_runtimes;

    #[test]
    fn same_seed_same_workload() {
        let a = generate_workload(7, 20, Complexity::default()).unwrap();
        let b = generate_workload(7, 20, Complexity::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_workload(8, 20, Complexity::default()).unwrap();
        assert_ne!(a.plans, c.plans);
    }

    #[test]
    fn plan_streams_do_not_depend_on_count() {
        let a = generate_workload(7, 5, Complexity::default()).unwrap();
        let b = generate_workload(7, 12, Complexity::default()).unwrap();
        assert_eq!(a.plans[..], b.plans[..5]);
    }

    #[test]
    fn no_joins_means_scan_and_aggregate() {
        let c = Complexity {
            min_joins: 0,
            max_joins: 0,
            tables: 3,
        };
        let w = generate_workload(11, 50, c).unwrap();
        for p in &w.plans {
            assert!(p.operator_count() <= 3, "{}", p.operator_count());
            assert_eq!(p.root_node().label, "Aggregate");
        }
    }

    #[test]
    fn infeasible_bounds_are_rejected() {
        let bad = [
            Complexity {
                min_joins: 3,
                max_joins: 1,
                tables: 8,
            },
            Complexity {
                min_joins: 0,
                max_joins: 7,
                tables: 9,
            },
            Complexity {
                min_joins: 0,
                max_joins: 3,
                tables: 3,
            },
        ];
        for c in bad {
            assert!(matches!(
                generate_workload(1, 1, c),
                Err(WorkloadError::Parameter(_))
            ));
        }
        assert!(generate_workload(1, 0, Complexity::default()).is_err());
    }

    #[test]
    fn cardinalities_follow_the_propagation_rules() {
        let w = generate_workload(3, 30, Complexity::default()).unwrap();
        for p in &w.plans {
            for n in p.operators() {
                let out = n.feature("actual_cardinality").unwrap();
                let ops: Vec<&PlanNode> = n
                    .children
                    .iter()
                    .map(|c| p.node(*c).unwrap())
                    .filter(|c| c.is_operator())
                    .collect();
                let preds: Vec<&PlanNode> = n
                    .children
                    .iter()
                    .map(|c| p.node(*c).unwrap())
                    .filter(|c| c.kind == NodeKind::Predicate)
                    .collect();
                let sel = preds
                    .first()
                    .map_or(1.0, |q| q.feature("selectivity").unwrap());
                match n.label.as_str() {
                    "Seq Scan" | "Index Scan" => {
                        let table = n
                            .children
                            .iter()
                            .map(|c| p.node(*c).unwrap())
                            .find(|c| c.kind == NodeKind::Table)
                            .unwrap();
                        let expect = table.feature("table_rows").unwrap() * sel;
                        assert!((out - expect).abs() <= 1e-9 * expect.max(1.0));
                    }
                    "Hash Join" | "Merge Join" | "Nested Loop" => {
                        let product: f64 = ops
                            .iter()
                            .map(|c| c.feature("actual_cardinality").unwrap())
                            .product();
                        let expect = product * sel;
                        assert!((out - expect).abs() <= 1e-9 * expect.max(1.0));
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn fixed_startup_only_oracle() {
        let params = OracleCostParams::uniform(
            OperatorCost {
                cost_per_input_row: 0.0,
                cost_per_output_row: 0.0,
                fixed_startup_ms: 5.0,
            },
            0.0,
        );
        let w = generate_workload_with(5, 10, Complexity::default(), params, None).unwrap();
        for p in &w.plans {
            let iso = isolate_runtimes(p);
            assert!(iso.per_node.values().all(|v| (*v - 5.0).abs() < 1e-9));
            assert!((p.actual_total_runtime_ms() - 5.0 * p.operator_count() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn isolation_inverts_the_oracle_without_noise() {
        let params = OracleCostParams {
            noise_fraction: 0.0,
            ..Default::default()
        };
        let w = generate_workload_with(9, 20, Complexity::default(), params.clone(), None).unwrap();
        for p in &w.plans {
            let iso = isolate_runtimes(p);
            assert!(iso.warnings.is_empty());
            for n in p.operators() {
                let cost = params.operators[&n.label];
                let out = n.feature("actual_cardinality").unwrap();
                let input: f64 = {
                    let ops: Vec<f64> = n
                        .children
                        .iter()
                        .map(|c| p.node(*c).unwrap())
                        .filter(|c| c.is_operator())
                        .map(|c| c.feature("actual_cardinality").unwrap())
                        .collect();
                    if ops.is_empty() {
                        n.children
                            .iter()
                            .map(|c| p.node(*c).unwrap())
                            .filter(|c| c.kind == NodeKind::Table)
                            .map(|c| c.feature("table_rows").unwrap())
                            .sum()
                    } else {
                        ops.iter().sum()
                    }
                };
                let expect = cost.fixed_startup_ms
                    + cost.cost_per_input_row * input
                    + cost.cost_per_output_row * out;
                let got = iso.get(n.id).unwrap();
                assert!(
                    (got - expect).abs() <= 1e-9 * expect.max(1.0),
                    "{got} vs {expect}"
                );
            }
            let rel =
                (iso.total() - p.actual_total_runtime_ms()).abs() / p.actual_total_runtime_ms();
            assert!(rel < 1e-9);
        }
    }

    #[test]
    fn per_row_cost_only_scales_with_rows() {
        let params = OracleCostParams::uniform(
            OperatorCost {
                cost_per_input_row: 0.0,
                cost_per_output_row: 1e-3,
                fixed_startup_ms: 0.0,
            },
            0.0,
        );
        let w = generate_workload_with(2, 10, Complexity::default(), params, None).unwrap();
        for p in &w.plans {
            let iso = isolate_runtimes(p);
            for n in p.operators() {
                let out = n.feature("actual_cardinality").unwrap();
                assert!((iso.get(n.id).unwrap() - 1e-3 * out).abs() <= 1e-9 * out.max(1.0));
            }
        }
    }

    #[test]
    fn oracle_reannotation_is_deterministic_and_noisy_within_bounds() {
        let w = generate_workload(4, 5, Complexity::default()).unwrap();
        let quiet = OracleCostParams {
            noise_fraction: 0.0,
            ..Default::default()
        };
        let noisy = OracleCostParams {
            noise_fraction: 0.5,
            ..Default::default()
        };
        for p in &w.plans {
            let a = oracle_runtime(p, &noisy, 99).unwrap();
            let b = oracle_runtime(p, &noisy, 99).unwrap();
            assert_eq!(a, b);
            let base = isolate_runtimes(&oracle_runtime(p, &quiet, 0).unwrap());
            let jittered = isolate_runtimes(&a);
            for (id, v) in &base.per_node {
                let r = jittered.per_node[id] / v;
                assert!((0.5..=1.5).contains(&r), "{r}");
            }
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_workload(7, 6, Complexity::default()).unwrap();
        w.save(dir.path()).unwrap();
        let back = Workload::load(dir.path()).unwrap();
        assert_eq!(back, w);
    }
}

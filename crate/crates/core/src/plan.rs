//! Featurized physical query plans.
//!
//! A plan is a rooted DAG. Operator nodes form a tree directed toward the
//! root operator; table, column and predicate nodes hang below the operators
//! that consume them and may be shared between several consumers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;

const RUNTIME_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("malformed plan document: {0}")]
    Json(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("structural error: {0}")]
    Structure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Operator,
    Table,
    Column,
    Predicate,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [
        NodeKind::Operator,
        NodeKind::Table,
        NodeKind::Column,
        NodeKind::Predicate,
    ];

    pub fn index(self) -> usize {
        match self {
            NodeKind::Operator => 0,
            NodeKind::Table => 1,
            NodeKind::Column => 2,
            NodeKind::Predicate => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Operator => "operator",
            NodeKind::Table => "table",
            NodeKind::Column => "column",
            NodeKind::Predicate => "predicate",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub label: String,
    #[serde(default)]
    pub features: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cumulative_runtime_ms: Option<f64>,
    #[serde(default)]
    pub children: Vec<NodeId>,
}

impl PlanNode {
    pub fn feature(&self, name: &str) -> Option<f64> {
        self.features.get(name).copied()
    }

    pub fn is_operator(&self) -> bool {
        self.kind == NodeKind::Operator
    }
}

/// Wire form of a plan; [`PlanGraph`] is only constructed after validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanDocument {
    plan_id: String,
    #[serde(default)]
    sql: String,
    actual_total_runtime_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicted_runtime_ms: Option<f64>,
    nodes: Vec<PlanNode>,
    root: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanDocument", into = "PlanDocument")]
pub struct PlanGraph {
    plan_id: String,
    sql: String,
    nodes: Vec<PlanNode>,
    root: NodeId,
    actual_total_runtime_ms: f64,
    predicted_runtime_ms: Option<f64>,
    #[serde(skip)]
    index: HashMap<NodeId, usize>,
    #[serde(skip)]
    order: Vec<usize>,
}

impl TryFrom<PlanDocument> for PlanGraph {
    type Error = PlanError;

    fn try_from(doc: PlanDocument) -> Result<Self, PlanError> {
        PlanGraph::new(
            doc.plan_id,
            doc.sql,
            doc.nodes,
            doc.root,
            doc.actual_total_runtime_ms,
            doc.predicted_runtime_ms,
        )
    }
}

impl From<PlanGraph> for PlanDocument {
    fn from(p: PlanGraph) -> Self {
        PlanDocument {
            plan_id: p.plan_id,
            sql: p.sql,
            actual_total_runtime_ms: p.actual_total_runtime_ms,
            predicted_runtime_ms: p.predicted_runtime_ms,
            nodes: p.nodes,
            root: p.root,
        }
    }
}

/// Parses and validates a plan JSON document.
pub fn parse_plan(document: &str) -> Result<PlanGraph, PlanError> {
    let doc: PlanDocument = serde_json::from_str(document).map_err(|e| classify_json_error(&e))?;
    PlanGraph::try_from(doc)
}

fn classify_json_error(e: &serde_json::Error) -> PlanError {
    // serde reports unknown enum variants (e.g. a bad node kind) as data errors.
    if e.is_data() {
        PlanError::Schema(e.to_string())
    } else {
        PlanError::Json(e.to_string())
    }
}

impl PlanGraph {
    /// Builds a plan and checks every structural invariant.
    pub fn new(
        plan_id: impl Into<String>,
        sql: impl Into<String>,
        nodes: Vec<PlanNode>,
        root: NodeId,
        actual_total_runtime_ms: f64,
        predicted_runtime_ms: Option<f64>,
    ) -> Result<Self, PlanError> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (pos, n) in nodes.iter().enumerate() {
            if index.insert(n.id, pos).is_some() {
                return Err(PlanError::Schema(format!("duplicate node id {}", n.id)));
            }
        }
        let mut plan = Self {
            plan_id: plan_id.into(),
            sql: sql.into(),
            nodes,
            root,
            actual_total_runtime_ms,
            predicted_runtime_ms,
            index,
            order: Vec::new(),
        };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&mut self) -> Result<(), PlanError> {
        if !(self.actual_total_runtime_ms.is_finite() && self.actual_total_runtime_ms > 0.0) {
            return Err(PlanError::Schema(format!(
                "actual_total_runtime_ms must be positive, found {}",
                self.actual_total_runtime_ms
            )));
        }
        if let Some(p) = self.predicted_runtime_ms {
            if !p.is_finite() {
                return Err(PlanError::Schema(
                    "predicted_runtime_ms is not finite".into(),
                ));
            }
        }
        for n in &self.nodes {
            for (name, v) in &n.features {
                if !v.is_finite() {
                    return Err(PlanError::Schema(format!(
                        "node {}: feature {name} is not finite",
                        n.id
                    )));
                }
            }
            match (n.kind, n.cumulative_runtime_ms) {
                (NodeKind::Operator, None) => {
                    return Err(PlanError::Schema(format!(
                        "operator node {} is missing cumulative_runtime_ms",
                        n.id
                    )))
                }
                (NodeKind::Operator, Some(rt)) if !(rt.is_finite() && rt >= 0.0) => {
                    return Err(PlanError::Schema(format!(
                        "operator node {} has invalid runtime {rt}",
                        n.id
                    )))
                }
                (kind, Some(_)) if kind != NodeKind::Operator => {
                    return Err(PlanError::Schema(format!(
                        "{kind} node {} must not carry a runtime",
                        n.id
                    )))
                }
                _ => {}
            }
            for c in &n.children {
                let Some(&child_pos) = self.index.get(c) else {
                    return Err(PlanError::Structure(format!(
                        "node {} references unknown child {c}",
                        n.id
                    )));
                };
                if n.kind != NodeKind::Operator && self.nodes[child_pos].is_operator() {
                    return Err(PlanError::Structure(format!(
                        "{} node {} has operator child {c}",
                        n.kind, n.id
                    )));
                }
            }
        }
        let Some(&root_pos) = self.index.get(&self.root) else {
            return Err(PlanError::Structure(format!(
                "root {} is not a node",
                self.root
            )));
        };
        if !self.nodes[root_pos].is_operator() {
            return Err(PlanError::Structure("root must be an operator node".into()));
        }

        self.order = self.post_order(root_pos)?;
        if self.order.len() != self.nodes.len() {
            let reached: HashSet<usize> = self.order.iter().copied().collect();
            let orphan = (0..self.nodes.len())
                .find(|p| !reached.contains(p))
                .unwrap_or(0);
            return Err(PlanError::Structure(format!(
                "node {} is not reachable from the root",
                self.nodes[orphan].id
            )));
        }

        // Operators form a tree: every non-root operator has exactly one operator parent.
        let mut operator_parents: HashMap<NodeId, usize> = HashMap::new();
        for n in self.nodes.iter().filter(|n| n.is_operator()) {
            for c in &n.children {
                if self.nodes[self.index[c]].is_operator() {
                    *operator_parents.entry(*c).or_default() += 1;
                }
            }
        }
        for n in self.nodes.iter().filter(|n| n.is_operator()) {
            let parents = operator_parents.get(&n.id).copied().unwrap_or(0);
            let expected = usize::from(n.id != self.root);
            if parents != expected {
                return Err(PlanError::Structure(format!(
                    "operator {} has {parents} operator parents, expected {expected}",
                    n.id
                )));
            }
        }

        let root_rt = self.nodes[root_pos]
            .cumulative_runtime_ms
            .unwrap_or_default();
        let total = self.actual_total_runtime_ms;
        if (root_rt - total).abs() > RUNTIME_REL_TOL * total.abs().max(root_rt.abs()) {
            return Err(PlanError::Schema(format!(
                "actual_total_runtime_ms {total} disagrees with root cumulative runtime {root_rt}"
            )));
        }
        Ok(())
    }

    /// Children-before-parents order of node positions, rejecting cycles.
    fn post_order(&self, root_pos: usize) -> Result<Vec<usize>, PlanError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let mut mark = vec![Mark::New; self.nodes.len()];
        let mut order = Vec::with_capacity(self.nodes.len());
        // (position, next child index)
        let mut stack = vec![(root_pos, 0usize)];
        mark[root_pos] = Mark::Active;
        while let Some(&mut (pos, ref mut next)) = stack.last_mut() {
            let children = &self.nodes[pos].children;
            if *next < children.len() {
                let child = self.index[&children[*next]];
                *next += 1;
                match mark[child] {
                    Mark::New => {
                        mark[child] = Mark::Active;
                        stack.push((child, 0));
                    }
                    Mark::Active => {
                        return Err(PlanError::Structure(format!(
                            "cycle through node {}",
                            self.nodes[child].id
                        )))
                    }
                    Mark::Done => {}
                }
            } else {
                mark[pos] = Mark::Done;
                order.push(pos);
                stack.pop();
            }
        }
        Ok(order)
    }

    pub fn plan_id(&self) -> &str {
        &self.plan_id
    }

    pub fn sql(&self) -> &str {
        &self.sql
    }

    pub fn nodes(&self) -> &[PlanNode] {
        &self.nodes
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn root_node(&self) -> &PlanNode {
        &self.nodes[self.index[&self.root]]
    }

    pub fn actual_total_runtime_ms(&self) -> f64 {
        self.actual_total_runtime_ms
    }

    pub fn predicted_runtime_ms(&self) -> Option<f64> {
        self.predicted_runtime_ms
    }

    pub fn with_prediction(mut self, predicted_ms: Option<f64>) -> Self {
        self.predicted_runtime_ms = predicted_ms;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn node(&self, id: NodeId) -> Option<&PlanNode> {
        self.position(id).map(|p| &self.nodes[p])
    }

    /// Node positions with children before parents; the root comes last.
    pub fn topological_positions(&self) -> &[usize] {
        &self.order
    }

    pub fn child_positions(&self, pos: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes[pos].children.iter().map(|c| self.index[c])
    }

    pub fn operators(&self) -> impl Iterator<Item = &PlanNode> {
        self.nodes.iter().filter(|n| n.is_operator())
    }

    pub fn operator_count(&self) -> usize {
        self.operators().count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serialization cannot fail")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }

    /// Same plan with every node id passed through `relabel`; node order is kept.
    pub fn relabeled(&self, relabel: impl Fn(NodeId) -> NodeId) -> Result<Self, PlanError> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| PlanNode {
                id: relabel(n.id),
                children: n.children.iter().map(|c| relabel(*c)).collect(),
                ..n.clone()
            })
            .collect();
        Self::new(
            self.plan_id.clone(),
            self.sql.clone(),
            nodes,
            relabel(self.root),
            self.actual_total_runtime_ms,
            self.predicted_runtime_ms,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampWarning {
    pub node_id: NodeId,
    /// The negative isolated runtime before clamping.
    pub unclamped_ms: f64,
}

/// Exclusive (own) runtime per operator node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolatedRuntimes {
    pub per_node: BTreeMap<NodeId, f64>,
    pub warnings: Vec<ClampWarning>,
}

impl IsolatedRuntimes {
    pub fn get(&self, id: NodeId) -> Option<f64> {
        self.per_node.get(&id).copied()
    }

    pub fn total(&self) -> f64 {
        self.per_node.values().sum()
    }
}

/// Subtracts the cumulative runtimes of each operator's direct operator
/// children from its own cumulative runtime, clamping negatives to zero.
pub fn isolate_runtimes(plan: &PlanGraph) -> IsolatedRuntimes {
    let mut per_node = BTreeMap::new();
    let mut warnings = Vec::new();
    for n in plan.operators() {
        let own = n.cumulative_runtime_ms.unwrap_or_default();
        let children: f64 = n
            .children
            .iter()
            .filter_map(|c| plan.node(*c))
            .filter(|c| c.is_operator())
            .filter_map(|c| c.cumulative_runtime_ms)
            .sum();
        let isolated = own - children;
        if isolated < 0.0 {
            warnings.push(ClampWarning {
                node_id: n.id,
                unclamped_ms: isolated,
            });
        }
        per_node.insert(n.id, isolated.max(0.0));
    }
    IsolatedRuntimes { per_node, warnings }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn op(id: NodeId, label: &str, runtime: f64, card: f64, children: &[NodeId]) -> PlanNode {
        PlanNode {
            id,
            kind: NodeKind::Operator,
            label: label.into(),
            features: BTreeMap::from([
                ("estimated_cardinality".into(), card),
                ("actual_cardinality".into(), card),
            ]),
            cumulative_runtime_ms: Some(runtime),
            children: children.to_vec(),
        }
    }

    pub fn aux(
        id: NodeId,
        kind: NodeKind,
        label: &str,
        features: &[(&str, f64)],
        children: &[NodeId],
    ) -> PlanNode {
        PlanNode {
            id,
            kind,
            label: label.into(),
            features: features.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            cumulative_runtime_ms: None,
            children: children.to_vec(),
        }
    }

    /// Two filtered scans under a hash join under an aggregate.
    pub fn join_plan() -> PlanGraph {
        let nodes = vec![
            aux(
                1,
                NodeKind::Table,
                "title",
                &[("table_rows", 2_528_312.0)],
                &[],
            ),
            aux(
                2,
                NodeKind::Column,
                "prod_year",
                &[("distinct_values", 133.0)],
                &[],
            ),
            aux(3, NodeKind::Predicate, ">=", &[("selectivity", 0.4)], &[2]),
            op(4, "Seq Scan", 120.0, 1_000_000.0, &[1, 3]),
            aux(
                5,
                NodeKind::Table,
                "movie_companies",
                &[("table_rows", 2_609_129.0)],
                &[],
            ),
            op(6, "Seq Scan", 90.0, 2_609_129.0, &[5]),
            aux(
                7,
                NodeKind::Column,
                "movie_id",
                &[("distinct_values", 1_087_236.0)],
                &[],
            ),
            aux(8, NodeKind::Predicate, "=", &[("selectivity", 1e-6)], &[7]),
            op(9, "Hash Join", 700.0, 2_000_000.0, &[4, 6, 8]),
            op(10, "Aggregate", 760.0, 1.0, &[9]),
        ];
        PlanGraph::new(
            "fig2",
            "SELECT COUNT(*) FROM title t, movie_companies mc WHERE ...",
            nodes,
            10,
            760.0,
            None,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn smallest_plan() {
        let nodes = vec![
            aux(1, NodeKind::Table, "t", &[("table_rows", 10.0)], &[]),
            op(2, "Seq Scan", 4.0, 10.0, &[1]),
        ];
        let plan = PlanGraph::new("p", "", nodes, 2, 4.0, None).unwrap();
        assert_eq!(plan.len(), 2);
        assert_eq!(plan.root(), 2);
        assert_eq!(plan.topological_positions(), &[0, 1]);
    }

    #[test]
    fn join_plan_shape() {
        let plan = join_plan();
        assert_eq!(plan.operator_count(), 4);
        assert_eq!(plan.root_node().label, "Aggregate");
        assert_eq!(
            *plan.topological_positions().last().unwrap(),
            plan.position(10).unwrap()
        );
    }

    #[test]
    fn child_list_containing_root_is_a_cycle() {
        let nodes = vec![
            aux(1, NodeKind::Table, "t", &[], &[]),
            op(2, "Seq Scan", 4.0, 10.0, &[1, 3]),
            op(3, "Aggregate", 5.0, 1.0, &[2]),
        ];
        let err = PlanGraph::new("p", "", nodes, 3, 5.0, None).unwrap_err();
        assert!(matches!(err, PlanError::Structure(_)), "{err}");
    }

    #[test]
    fn operator_without_runtime_is_schema_error() {
        let mut scan = op(2, "Seq Scan", 4.0, 10.0, &[1]);
        scan.cumulative_runtime_ms = None;
        let nodes = vec![aux(1, NodeKind::Table, "t", &[], &[]), scan];
        let err = PlanGraph::new("p", "", nodes, 2, 4.0, None).unwrap_err();
        assert!(matches!(err, PlanError::Schema(_)));
    }

    #[test]
    fn unknown_kind_is_schema_error() {
        let doc = r#"{"plan_id":"p","sql":"","actual_total_runtime_ms":1,"root":1,
            "nodes":[{"id":1,"kind":"mystery","label":"x","features":{},"children":[]}]}"#;
        assert!(matches!(parse_plan(doc), Err(PlanError::Schema(_))));
        assert!(matches!(
            parse_plan("{\"plan_id\": "),
            Err(PlanError::Json(_))
        ));
    }

    #[test]
    fn rejects_dangling_children_and_orphans() {
        let nodes = vec![op(2, "Seq Scan", 4.0, 10.0, &[9])];
        assert!(matches!(
            PlanGraph::new("p", "", nodes, 2, 4.0, None),
            Err(PlanError::Structure(_))
        ));
        let nodes = vec![
            aux(1, NodeKind::Table, "t", &[], &[]),
            op(2, "Seq Scan", 4.0, 10.0, &[]),
        ];
        assert!(matches!(
            PlanGraph::new("p", "", nodes, 2, 4.0, None),
            Err(PlanError::Structure(_))
        ));
    }

    #[test]
    fn runtime_on_auxiliary_node_is_rejected() {
        let mut t = aux(1, NodeKind::Table, "t", &[], &[]);
        t.cumulative_runtime_ms = Some(1.0);
        let nodes = vec![t, op(2, "Seq Scan", 4.0, 10.0, &[1])];
        assert!(PlanGraph::new("p", "", nodes, 2, 4.0, None).is_err());
    }

    #[test]
    fn total_must_match_root_runtime() {
        let nodes = vec![
            aux(1, NodeKind::Table, "t", &[], &[]),
            op(2, "Seq Scan", 4.0, 10.0, &[1]),
        ];
        assert!(PlanGraph::new("p", "", nodes, 2, 4.5, None).is_err());
    }

    #[test]
    fn operator_with_two_operator_parents_is_rejected() {
        let nodes = vec![
            aux(1, NodeKind::Table, "t", &[], &[]),
            op(2, "Seq Scan", 4.0, 10.0, &[1]),
            op(3, "Sort", 6.0, 10.0, &[2]),
            op(4, "Hash Join", 12.0, 10.0, &[2, 3]),
        ];
        assert!(matches!(
            PlanGraph::new("p", "", nodes, 4, 12.0, None),
            Err(PlanError::Structure(_))
        ));
    }

    #[test]
    fn shared_column_nodes_are_allowed() {
        let nodes = vec![
            aux(1, NodeKind::Table, "t", &[], &[]),
            aux(2, NodeKind::Column, "c", &[], &[]),
            aux(3, NodeKind::Predicate, "<", &[], &[2]),
            aux(4, NodeKind::Predicate, ">", &[], &[2]),
            aux(5, NodeKind::Predicate, "AND", &[], &[3, 4]),
            op(6, "Seq Scan", 4.0, 10.0, &[1, 5, 2]),
        ];
        let plan = PlanGraph::new("p", "", nodes, 6, 4.0, None).unwrap();
        assert_eq!(plan.topological_positions().len(), 6);
    }

    #[test]
    fn isolated_runtime_subtracts_direct_operator_children() {
        let nodes = vec![
            aux(1, NodeKind::Table, "a", &[], &[]),
            op(2, "Seq Scan", 30.0, 1.0, &[1]),
            aux(3, NodeKind::Table, "b", &[], &[]),
            op(4, "Seq Scan", 50.0, 1.0, &[3]),
            op(5, "Hash Join", 100.0, 1.0, &[2, 4]),
        ];
        let plan = PlanGraph::new("p", "", nodes, 5, 100.0, None).unwrap();
        let iso = isolate_runtimes(&plan);
        assert_eq!(iso.get(5), Some(20.0));
        assert_eq!(iso.get(2), Some(30.0));
        assert_eq!(iso.get(1), None);
        assert!(iso.warnings.is_empty());
        assert!((iso.total() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn leaf_scan_keeps_its_runtime() {
        let nodes = vec![
            aux(1, NodeKind::Table, "a", &[], &[]),
            op(2, "Seq Scan", 40.0, 1.0, &[1]),
        ];
        let plan = PlanGraph::new("p", "", nodes, 2, 40.0, None).unwrap();
        assert_eq!(isolate_runtimes(&plan).get(2), Some(40.0));
    }

    #[test]
    fn negative_isolated_runtime_is_clamped_and_reported() {
        let nodes = vec![
            aux(1, NodeKind::Table, "a", &[], &[]),
            op(2, "Seq Scan", 30.0, 1.0, &[1]),
            aux(3, NodeKind::Table, "b", &[], &[]),
            op(4, "Seq Scan", 30.0, 1.0, &[3]),
            op(5, "Hash Join", 50.0, 1.0, &[2, 4]),
        ];
        let plan = PlanGraph::new("p", "", nodes, 5, 50.0, None).unwrap();
        let iso = isolate_runtimes(&plan);
        assert_eq!(iso.get(5), Some(0.0));
        assert_eq!(
            iso.warnings,
            vec![ClampWarning {
                node_id: 5,
                unclamped_ms: -10.0
            }]
        );
    }

    #[test]
    fn relabeling_keeps_structure() {
        let plan = join_plan();
        let moved = plan.relabeled(|id| 100 - id).unwrap();
        assert_eq!(moved.root(), 90);
        assert_eq!(moved.topological_positions(), plan.topological_positions());
    }
}

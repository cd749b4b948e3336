//! Fixed-width feature vectors per node kind.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::plan::{NodeKind, PlanGraph, PlanNode};
use crate::tensor::Tensor;

pub const OPERATOR_VOCABULARY: [&str; 7] = [
    "Seq Scan",
    "Index Scan",
    "Hash Join",
    "Merge Join",
    "Nested Loop",
    "Sort",
    "Aggregate",
];

pub const PREDICATE_VOCABULARY: [&str; 8] = ["=", "<", ">", "<=", ">=", "LIKE", "AND", "OR"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("node {node_id}: {kind} label {label:?} is outside the vocabulary")]
    UnknownLabel {
        node_id: u32,
        kind: NodeKind,
        label: String,
    },
    #[error("node {node_id}: missing attribute {attribute:?}")]
    MissingAttribute { node_id: u32, attribute: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Log1p,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumericFeature {
    pub attribute: String,
    pub transform: Transform,
}

/// Per-kind layout: optional one-hot label block followed by numeric attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindLayout {
    pub vocabulary: Option<Vec<String>>,
    pub numeric: Vec<NumericFeature>,
}

impl KindLayout {
    pub fn width(&self) -> usize {
        self.vocabulary.as_ref().map_or(0, Vec::len) + self.numeric.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub operator: KindLayout,
    pub table: KindLayout,
    pub column: KindLayout,
    pub predicate: KindLayout,
}

fn numeric(attribute: &str, transform: Transform) -> NumericFeature {
    NumericFeature {
        attribute: attribute.into(),
        transform,
    }
}

fn vocab(words: &[&str]) -> Option<Vec<String>> {
    Some(words.iter().map(|w| w.to_string()).collect())
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            operator: KindLayout {
                vocabulary: vocab(&OPERATOR_VOCABULARY),
                numeric: vec![numeric("estimated_cardinality", Transform::Log1p)],
            },
            table: KindLayout {
                vocabulary: None,
                numeric: vec![numeric("table_rows", Transform::Log1p)],
            },
            column: KindLayout {
                vocabulary: None,
                numeric: vec![numeric("distinct_values", Transform::Log1p)],
            },
            predicate: KindLayout {
                vocabulary: vocab(&PREDICATE_VOCABULARY),
                numeric: vec![numeric("selectivity", Transform::Identity)],
            },
        }
    }
}

impl FeatureSchema {
    pub fn layout(&self, kind: NodeKind) -> &KindLayout {
        match kind {
            NodeKind::Operator => &self.operator,
            NodeKind::Table => &self.table,
            NodeKind::Column => &self.column,
            NodeKind::Predicate => &self.predicate,
        }
    }

    pub fn width(&self, kind: NodeKind) -> usize {
        self.layout(kind).width()
    }

    /// Hex SHA-256 of the canonical JSON form; model files are tied to it.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serialization cannot fail");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn featurize_node(&self, node: &PlanNode) -> Result<Vec<f64>, FeatureError> {
        let layout = self.layout(node.kind);
        let mut out = Vec::with_capacity(layout.width());
        if let Some(words) = &layout.vocabulary {
            let hot = words.iter().position(|w| *w == node.label).ok_or_else(|| {
                FeatureError::UnknownLabel {
                    node_id: node.id,
                    kind: node.kind,
                    label: node.label.clone(),
                }
            })?;
            out.extend((0..words.len()).map(|i| if i == hot { 1.0 } else { 0.0 }));
        }
        for f in &layout.numeric {
            let raw = node
                .feature(&f.attribute)
                .ok_or_else(|| FeatureError::MissingAttribute {
                    node_id: node.id,
                    attribute: f.attribute.clone(),
                })?;
            out.push(match f.transform {
                Transform::Log1p => raw.max(0.0).ln_1p(),
                Transform::Identity => raw,
            });
        }
        Ok(out)
    }
}

/// One feature row per plan node, in plan node order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedPlan {
    pub rows: Vec<Tensor>,
}

pub fn featurize(plan: &PlanGraph, schema: &FeatureSchema) -> Result<FeaturizedPlan, FeatureError> {
    let rows = plan
        .nodes()
        .iter()
        .map(|n| schema.featurize_node(n).map(Tensor::row))
        .collect::<Result<_, _>>()?;
    Ok(FeaturizedPlan { rows })
}

//! Query plan trees: ingest, operator normalization, canonical serialization,
//! metric labels and per-node feature extraction.

mod dialect;
mod features;
mod taxonomy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use dialect::{PlanDialect, PostgresJson};
pub use features::{extract_node_features, CategoricalField, FeatureError, FeatureSchema};
pub use taxonomy::{
    normalize_operator, normalize_operator_with_warnings, operator_group, Level,
    NormalizeWarning, OperatorGroup, OperatorTriple, BR_CLOSE, BR_OPEN, CLS, LEVEL1, LEVEL2,
    LEVEL3, NIL, RESERVED, SEP, UNK,
};

/// Named node properties. Ordered so serialization is byte-stable.
pub type Properties = BTreeMap<String, Value>;

pub const TOTAL_COST: &str = "Total Cost";
pub const TOTAL_TIME: &str = "Actual Total Time";
pub const STARTUP_TIME: &str = "Actual Startup Time";

/// Property keys that are prediction targets and never feature inputs.
pub const LABEL_FIELDS: [&str; 3] = [TOTAL_COST, TOTAL_TIME, STARTUP_TIME];

/// Marker value of the `format` key in canonical plan documents.
pub const CANONICAL_FORMAT: &str = "qplan-plan/1";

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("malformed plan document: {0}")]
    MalformedDocument(String),
    #[error("plan document has no root node")]
    EmptyPlan,
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("negative label {field} = {value}")]
    NegativeLabel { field: &'static str, value: f64 },
    #[error("startup time {startup} exceeds total time {total}")]
    StartupExceedsTotal { startup: f64, total: f64 },
    #[error("label {field} is not a number")]
    NotANumber { field: &'static str },
}

/// Performance labels of one node. Absent values mean the plan was not executed
/// (or the engine did not report them).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_cost: Option<f64>,
    /// Milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_time: Option<f64>,
    /// Milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub startup_time: Option<f64>,
}

impl MetricLabels {
    pub fn validate(&self) -> Result<(), LabelError> {
        for (field, v) in [
            (TOTAL_COST, self.total_cost),
            (TOTAL_TIME, self.total_time),
            (STARTUP_TIME, self.startup_time),
        ] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(LabelError::NotANumber { field });
                }
                if v < 0.0 {
                    return Err(LabelError::NegativeLabel { field, value: v });
                }
            }
        }
        if let (Some(startup), Some(total)) = (self.startup_time, self.total_time) {
            if startup > total {
                return Err(LabelError::StartupExceedsTotal { startup, total });
            }
        }
        Ok(())
    }

    /// Labels as `[cost, total_time, startup_time]`.
    pub fn as_array(&self) -> [Option<f64>; 3] {
        [self.total_cost, self.total_time, self.startup_time]
    }
}

/// Reads the label fields out of a raw property map.
pub fn extract_labels(properties: &Properties) -> Result<MetricLabels, LabelError> {
    let read = |field: &'static str| -> Result<Option<f64>, LabelError> {
        match properties.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or(LabelError::NotANumber { field }),
        }
    };
    let labels = MetricLabels {
        total_cost: read(TOTAL_COST)?,
        total_time: read(TOTAL_TIME)?,
        startup_time: read(STARTUP_TIME)?,
    };
    labels.validate()?;
    Ok(labels)
}

/// One operator node. `properties` is the label-stripped view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    #[serde(rename = "node")]
    pub raw_name: String,
    pub triple: OperatorTriple,
    #[serde(default, skip_serializing_if = "is_unlabeled")]
    pub labels: MetricLabels,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub properties: Properties,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<PlanNode>,
}

fn is_unlabeled(l: &MetricLabels) -> bool {
    *l == MetricLabels::default()
}

impl PlanNode {
    /// Builds a node from a raw operator name and its full property map,
    /// normalizing the name and moving label fields into [`MetricLabels`].
    pub fn from_raw(
        raw_name: &str,
        mut properties: Properties,
        children: Vec<PlanNode>,
    ) -> Result<Self, LabelError> {
        let labels = extract_labels(&properties)?;
        for f in LABEL_FIELDS {
            properties.remove(f);
        }
        let triple = normalize_operator(raw_name, &properties);
        Ok(Self {
            raw_name: raw_name.to_owned(),
            triple,
            labels,
            properties,
            children,
        })
    }

    /// A bare node with the given triple and no properties.
    pub fn with_triple(triple: OperatorTriple, children: Vec<PlanNode>) -> Self {
        Self {
            raw_name: triple.render(),
            triple,
            labels: MetricLabels::default(),
            properties: Properties::new(),
            children,
        }
    }

    pub fn subtree_size(&self) -> usize {
        1 + self.children.iter().map(PlanNode::subtree_size).sum::<usize>()
    }

    pub fn group(&self) -> OperatorGroup {
        operator_group(&self.triple)
    }

    /// Recursively sorts children into canonical order.
    pub fn normalize(&mut self) {
        for c in &mut self.children {
            c.normalize();
        }
        if self.children.len() > 1 {
            let mut keyed: Vec<(String, usize, String, Vec<u8>, PlanNode)> = self
                .children
                .drain(..)
                .map(|c| {
                    let bytes = serde_json::to_vec(&c).expect("plan nodes serialize");
                    (c.triple.render(), c.subtree_size(), c.shape_key(), bytes, c)
                })
                .collect();
            keyed.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1.cmp(&b.1))
                    .then_with(|| a.2.cmp(&b.2))
                    .then_with(|| a.3.cmp(&b.3))
            });
            self.children = keyed.into_iter().map(|k| k.4).collect();
        }
    }

    /// Operator triples and child counts in root-first order, so ties between
    /// siblings are broken by structure before properties.
    fn shape_key(&self) -> String {
        let mut key = format!("{}/{};", self.triple.render(), self.children.len());
        for c in &self.children {
            key.push_str(&c.shape_key());
        }
        key
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a PlanNode>) {
        out.push(self);
        for c in &self.children {
            c.visit(out);
        }
    }
}

/// A plan: an ordered tree of operator nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanTree {
    pub root: PlanNode,
    pub node_count: usize,
    pub source_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CanonicalDoc {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_id: Option<String>,
    node_count: usize,
    root: PlanNode,
}

impl PlanTree {
    pub fn new(root: PlanNode, source_id: Option<String>) -> Self {
        let node_count = root.subtree_size();
        Self {
            root,
            node_count,
            source_id,
        }
    }

    /// Nodes in root-first order.
    pub fn nodes(&self) -> Vec<&PlanNode> {
        let mut out = Vec::with_capacity(self.node_count);
        self.root.visit(&mut out);
        out
    }

    pub fn depth(&self) -> usize {
        fn d(n: &PlanNode) -> usize {
            1 + n.children.iter().map(d).max().unwrap_or(0)
        }
        d(&self.root)
    }

    /// Copy with children in canonical order throughout.
    pub fn normalized(&self) -> PlanTree {
        let mut t = self.clone();
        t.root.normalize();
        t
    }

    pub fn to_canonical_value(&self) -> Value {
        let doc = CanonicalDoc {
            format: CANONICAL_FORMAT.to_owned(),
            source_id: self.source_id.clone(),
            node_count: self.node_count,
            root: self.root.clone(),
        };
        serde_json::to_value(doc).expect("plan serializes")
    }

    /// Canonical single-line JSON serialization.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(&self.to_canonical_value()).expect("plan serializes")
    }

    pub fn from_canonical_value(value: Value) -> Result<Self, PlanError> {
        let doc: CanonicalDoc = serde_json::from_value(value)
            .map_err(|e| PlanError::MalformedDocument(e.to_string()))?;
        if doc.format != CANONICAL_FORMAT {
            return Err(PlanError::MalformedDocument(format!(
                "unsupported format {:?}",
                doc.format
            )));
        }
        let tree = PlanTree::new(doc.root, doc.source_id);
        if tree.node_count != doc.node_count {
            return Err(PlanError::MalformedDocument(format!(
                "node_count {} disagrees with {} nodes present",
                doc.node_count, tree.node_count
            )));
        }
        for n in tree.nodes() {
            n.labels.validate()?;
            if let Some(f) = LABEL_FIELDS.iter().find(|f| n.properties.contains_key(**f)) {
                return Err(PlanError::MalformedDocument(format!(
                    "label field {f:?} stored as a property"
                )));
            }
        }
        Ok(tree)
    }
}

/// Parses one plan document: either the canonical format or an
/// `EXPLAIN (FORMAT JSON)` document.
pub fn parse_plan_document(text: &str) -> Result<PlanTree, PlanError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| PlanError::MalformedDocument(e.to_string()))?;
    parse_plan_value(value)
}

pub fn parse_plan_value(value: Value) -> Result<PlanTree, PlanError> {
    if value.get("format").and_then(Value::as_str) == Some(CANONICAL_FORMAT) {
        return PlanTree::from_canonical_value(value);
    }
    PostgresJson.parse(&value)
}

/// Parses a JSONL corpus, one plan per non-empty line. Lines that are objects
/// with a `plan` key (corpus records) have that key parsed.
pub fn parse_plan_jsonl(text: &str) -> Result<Vec<PlanTree>, PlanError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)
            .map_err(|e| PlanError::MalformedDocument(format!("line {}: {e}", lineno + 1)))?;
        let value = match value {
            Value::Object(mut m) if m.contains_key("plan") => m.remove("plan").unwrap(),
            other => other,
        };
        out.push(parse_plan_value(value)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_document() {
        let t = parse_plan_document(r#"[{"Plan": {"Node Type": "Seq Scan", "Relation Name": "t"}}]"#)
            .unwrap();
        assert_eq!(t.node_count, 1);
        assert_eq!(t.root.triple, OperatorTriple::new("Scan", "Seq", NIL));
        assert!(t.root.children.is_empty());
    }

    #[test]
    fn missing_plans_key_is_leaf() {
        let t = parse_plan_document(r#"{"Node Type": "Sort", "Plan Rows": 3}"#).unwrap();
        assert_eq!(t.node_count, 1);
        assert!(t.root.children.is_empty());
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_plan_document("{not json"), Err(PlanError::MalformedDocument(_))));
        assert!(matches!(parse_plan_document("[]"), Err(PlanError::EmptyPlan)));
        assert!(matches!(parse_plan_document(r#"{"Planning Time": 1.0}"#), Err(PlanError::EmptyPlan)));
    }

    #[test]
    fn labels_are_separated() {
        let t = parse_plan_document(
            r#"{"Node Type": "Seq Scan", "Total Cost": 101.5, "Actual Total Time": 8.2,
                "Actual Startup Time": 0.1, "Actual Rows": 10}"#,
        )
        .unwrap();
        assert_eq!(
            t.root.labels,
            MetricLabels {
                total_cost: Some(101.5),
                total_time: Some(8.2),
                startup_time: Some(0.1)
            }
        );
        for f in LABEL_FIELDS {
            assert!(!t.root.properties.contains_key(f));
        }
        assert!(t.root.properties.contains_key("Actual Rows"));
    }

    #[test]
    fn planner_only_labels() {
        let mut p = Properties::new();
        p.insert(TOTAL_COST.into(), 12.0.into());
        let l = extract_labels(&p).unwrap();
        assert_eq!(l.total_cost, Some(12.0));
        assert_eq!(l.total_time, None);
        assert_eq!(l.startup_time, None);
    }

    #[test]
    fn label_validation() {
        let mut p = Properties::new();
        p.insert(TOTAL_TIME.into(), 8.0.into());
        p.insert(STARTUP_TIME.into(), 9.0.into());
        assert!(matches!(extract_labels(&p), Err(LabelError::StartupExceedsTotal { .. })));
        let mut p = Properties::new();
        p.insert(TOTAL_COST.into(), (-1.0).into());
        assert!(matches!(extract_labels(&p), Err(LabelError::NegativeLabel { .. })));
    }

    #[test]
    fn canonical_round_trip() {
        let t = parse_plan_document(
            r#"{"Node Type": "Hash Join", "Join Type": "Left", "Total Cost": 3.5,
                "Plans": [{"Node Type": "Seq Scan", "Relation Name": "a"},
                          {"Node Type": "Hash", "Plans": [{"Node Type": "Index Scan", "Output": ["x", "y"]}]}]}"#,
        )
        .unwrap();
        let again = parse_plan_document(&t.to_canonical_json()).unwrap();
        assert_eq!(t, again);
        assert_eq!(again.node_count, 4);
    }

    #[test]
    fn normalize_sorts_children() {
        let t = parse_plan_document(
            r#"{"Node Type": "Hash Join",
                "Plans": [{"Node Type": "Seq Scan"}, {"Node Type": "Hash"}]}"#,
        )
        .unwrap();
        let n = t.normalized();
        let names: Vec<_> = n.root.children.iter().map(|c| c.triple.render()).collect();
        assert_eq!(names, ["Hash--", "Scan-Seq-"]);
    }
}

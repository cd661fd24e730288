//! Engine-specific document layouts.

use serde_json::Value;

use super::{PlanError, PlanNode, PlanTree, Properties};

/// Adapter from an engine's plan document layout to [`PlanTree`].
pub trait PlanDialect {
    /// Locates the root plan object inside a document.
    fn root<'a>(&self, doc: &'a Value) -> Option<&'a Value>;
    fn node_type<'a>(&self, node: &'a Value) -> Option<&'a str>;
    fn children<'a>(&self, node: &'a Value) -> &'a [Value];
    /// Keys that carry structure rather than node properties.
    fn structural_keys(&self) -> &'static [&'static str];

    fn parse(&self, doc: &Value) -> Result<PlanTree, PlanError> {
        let root = self.root(doc).ok_or(PlanError::EmptyPlan)?;
        let node = self.parse_node(root)?;
        Ok(PlanTree::new(node, None))
    }

    fn parse_node(&self, value: &Value) -> Result<PlanNode, PlanError> {
        let obj = value
            .as_object()
            .ok_or_else(|| PlanError::MalformedDocument("plan node is not an object".into()))?;
        let name = self
            .node_type(value)
            .filter(|n| !n.is_empty())
            .ok_or_else(|| PlanError::MalformedDocument("plan node without a node type".into()))?;
        let skip = self.structural_keys();
        let properties: Properties = obj
            .iter()
            .filter(|(k, _)| !skip.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let children = self
            .children(value)
            .iter()
            .map(|c| self.parse_node(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PlanNode::from_raw(name, properties, children)?)
    }
}

/// PostgreSQL `EXPLAIN (ANALYZE, BUFFERS, FORMAT JSON)` output: a one-element
/// array holding `{"Plan": {...}}`, the `{"Plan": ...}` object itself, or a bare node.
#[derive(Debug, Clone, Copy, Default)]
pub struct PostgresJson;

impl PlanDialect for PostgresJson {
    fn root<'a>(&self, doc: &'a Value) -> Option<&'a Value> {
        let doc = match doc {
            Value::Array(items) => items.first()?,
            other => other,
        };
        if let Some(plan) = doc.get("Plan") {
            return Some(plan);
        }
        doc.get("Node Type").map(|_| doc)
    }

    fn node_type<'a>(&self, node: &'a Value) -> Option<&'a str> {
        node.get("Node Type").and_then(Value::as_str)
    }

    fn children<'a>(&self, node: &'a Value) -> &'a [Value] {
        node.get("Plans")
            .and_then(Value::as_array)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    fn structural_keys(&self) -> &'static [&'static str] {
        &["Node Type", "Plans"]
    }
}

//! Fixed-length numeric encoding of node properties.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{PlanNode, LABEL_FIELDS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("schema declares width {declared} but its fields produce {actual} slots")]
    SchemaMismatch { declared: usize, actual: usize },
    #[error("schema lists label field {0:?} as a feature")]
    LabelInSchema(String),
    #[error("unsupported feature schema version {0}")]
    UnsupportedVersion(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalField {
    pub name: String,
    pub values: Vec<String>,
}

/// Versioned description of how node properties become `f_node`.
///
/// Slot layout, in order: numeric fields (raw value, booleans as 0/1),
/// categorical one-hots, list fields as `[length, present]`, and presence flags
/// for string-valued fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub numeric: Vec<String>,
    pub categorical: Vec<CategoricalField>,
    pub lists: Vec<String>,
    pub presence: Vec<String>,
    pub width: usize,
}

pub const FEATURE_SCHEMA_VERSION: u32 = 1;

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| (*s).to_owned()).collect()
}

impl Default for FeatureSchema {
    fn default() -> Self {
        let numeric = strings(&[
            "Actual Loops",
            "Actual Rows",
            "Local Dirtied Blocks",
            "Local Hit Blocks",
            "Local Read Blocks",
            "Local Written Blocks",
            "Plan Rows",
            "Plan Width",
            "Shared Dirtied Blocks",
            "Shared Hit Blocks",
            "Shared Read Blocks",
            "Shared Written Blocks",
            "Temp Read Blocks",
            "Temp Written Blocks",
            "Plan Buffers",
            "Rows Removed by Filter",
            "Rows Removed by Index Recheck",
            "Exact Heap Blocks",
            "Lossy Heap Blocks",
            "Rows Removed by Join Filter",
            "Hash Buckets",
            "Hash Batches",
            "Peak Memory Usage",
            "Sort Space Used",
            "Parallel Aware",
            "Inner Unique",
        ]);
        let cat = |name: &str, values: &[&str]| CategoricalField {
            name: name.to_owned(),
            values: strings(values),
        };
        let categorical = vec![
            cat(
                "Parent Relationship",
                &["Outer", "Inner", "Member", "Subquery", "InitPlan", "SubPlan"],
            ),
            cat("Scan Direction", &["Forward", "Backward", "NoMovement"]),
            cat("Join Type", &["Inner", "Left", "Right", "Full", "Semi", "Anti"]),
            cat(
                "Sort Method",
                &["quicksort", "top-N heapsort", "external sort", "external merge"],
            ),
            cat("Sort Space Type", &["Memory", "Disk"]),
            cat("Strategy", &["Plain", "Sorted", "Hashed", "Mixed"]),
            cat("Partial Mode", &["Simple", "Partial", "Finalize"]),
        ];
        let lists = strings(&["Sort Key", "Group Key", "Output"]);
        let presence = strings(&[
            "Relation Name",
            "Index Name",
            "Index Cond",
            "Filter",
            "Hash Cond",
            "Merge Cond",
            "Join Filter",
            "Recheck Cond",
        ]);
        let mut schema = FeatureSchema {
            version: FEATURE_SCHEMA_VERSION,
            numeric,
            categorical,
            lists,
            presence,
            width: 0,
        };
        schema.width = schema.slot_count();
        schema
    }
}

impl FeatureSchema {
    fn slot_count(&self) -> usize {
        self.numeric.len()
            + self.categorical.iter().map(|c| c.values.len()).sum::<usize>()
            + 2 * self.lists.len()
            + self.presence.len()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.version != FEATURE_SCHEMA_VERSION {
            return Err(FeatureError::UnsupportedVersion(self.version));
        }
        let actual = self.slot_count();
        if actual != self.width {
            return Err(FeatureError::SchemaMismatch {
                declared: self.width,
                actual,
            });
        }
        let names = self
            .numeric
            .iter()
            .chain(self.categorical.iter().map(|c| &c.name))
            .chain(&self.lists)
            .chain(&self.presence);
        for n in names {
            if LABEL_FIELDS.contains(&n.as_str()) {
                return Err(FeatureError::LabelInSchema(n.clone()));
            }
        }
        Ok(())
    }

    /// Human-readable name of every slot, in vector order.
    pub fn slot_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.numeric.clone();
        for c in &self.categorical {
            out.extend(c.values.iter().map(|v| format!("{}={}", c.name, v)));
        }
        for l in &self.lists {
            out.push(format!("{l}#len"));
            out.push(format!("{l}#present"));
        }
        out.extend(self.presence.iter().map(|p| format!("{p}#present")));
        out
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Builds `f_node` for one node. Reads only the label-stripped property view.
pub fn extract_node_features(
    node: &PlanNode,
    schema: &FeatureSchema,
) -> Result<Vec<f64>, FeatureError> {
    schema.validate()?;
    let props = &node.properties;
    let mut v = Vec::with_capacity(schema.width);
    for name in &schema.numeric {
        let x = match props.get(name) {
            Some(Value::Number(n)) => n.as_f64().unwrap_or(0.0),
            Some(Value::Bool(b)) => f64::from(u8::from(*b)),
            _ => 0.0,
        };
        v.push(x);
    }
    for field in &schema.categorical {
        let value = props.get(&field.name).and_then(Value::as_str);
        v.extend(
            field
                .values
                .iter()
                .map(|candidate| f64::from(u8::from(value == Some(candidate.as_str())))),
        );
    }
    for name in &schema.lists {
        match props.get(name) {
            Some(Value::Array(items)) => {
                v.push(items.len() as f64);
                v.push(1.0);
            }
            Some(Value::Null) | None => v.extend([0.0, 0.0]),
            Some(_) => v.extend([1.0, 1.0]),
        }
    }
    for name in &schema.presence {
        let present = !matches!(props.get(name), None | Some(Value::Null));
        v.push(f64::from(u8::from(present)));
    }
    if v.len() != schema.width {
        return Err(FeatureError::SchemaMismatch {
            declared: schema.width,
            actual: v.len(),
        });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{parse_plan_document, Properties};
    use serde_json::json;

    fn node(props: Value) -> PlanNode {
        let props: Properties = props.as_object().unwrap().clone().into_iter().collect();
        PlanNode::from_raw("Seq Scan", props, vec![]).unwrap()
    }

    #[test]
    fn sparse_numeric_slots() {
        let schema = FeatureSchema::default();
        let f = extract_node_features(&node(json!({"Actual Rows": 10, "Plan Rows": 12})), &schema)
            .unwrap();
        assert_eq!(f.len(), schema.width);
        let nonzero: Vec<_> = f
            .iter()
            .zip(schema.slot_names())
            .filter(|(x, _)| **x != 0.0)
            .map(|(x, n)| (n, *x))
            .collect();
        assert_eq!(
            nonzero,
            vec![("Actual Rows".to_owned(), 10.0), ("Plan Rows".to_owned(), 12.0)]
        );
    }

    #[test]
    fn labels_never_become_features() {
        let schema = FeatureSchema::default();
        let n = node(json!({"Actual Total Time": 5.0, "Total Cost": 7.0, "Actual Startup Time": 1.0}));
        assert_eq!(n.labels.total_time, Some(5.0));
        let f = extract_node_features(&n, &schema).unwrap();
        assert!(f.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn categorical_and_lists() {
        let schema = FeatureSchema::default();
        let n = node(json!({"Join Type": "Semi", "Sort Key": ["a", "b"], "Filter": "(x > 1)", "Parallel Aware": true}));
        let f = extract_node_features(&n, &schema).unwrap();
        let names = schema.slot_names();
        let get = |name: &str| f[names.iter().position(|n| n == name).unwrap()];
        assert_eq!(get("Join Type=Semi"), 1.0);
        assert_eq!(get("Join Type=Inner"), 0.0);
        assert_eq!(get("Sort Key#len"), 2.0);
        assert_eq!(get("Sort Key#present"), 1.0);
        assert_eq!(get("Filter#present"), 1.0);
        assert_eq!(get("Parallel Aware"), 1.0);
    }

    #[test]
    fn schema_mismatch_and_label_rejection() {
        let mut s = FeatureSchema::default();
        s.width += 1;
        assert!(matches!(s.validate(), Err(FeatureError::SchemaMismatch { .. })));
        let mut s = FeatureSchema::default();
        s.numeric.push("Total Cost".into());
        s.width += 1;
        assert_eq!(s.validate(), Err(FeatureError::LabelInSchema("Total Cost".into())));
        let json = serde_json::to_string(&FeatureSchema::default()).unwrap();
        assert_eq!(FeatureSchema::from_json(&json).unwrap(), FeatureSchema::default());
    }

    #[test]
    fn fixed_length_over_a_tree() {
        let schema = FeatureSchema::default();
        let t = parse_plan_document(
            r#"{"Node Type": "Hash Join", "Hash Cond": "(a.x = b.y)", "Plans": [
                {"Node Type": "Seq Scan", "Actual Rows": 3},
                {"Node Type": "Hash", "Hash Buckets": 1024, "Plans": [{"Node Type": "Index Scan"}]}]}"#,
        )
        .unwrap();
        for n in t.nodes() {
            assert_eq!(extract_node_features(n, &schema).unwrap().len(), schema.width);
        }
    }
}

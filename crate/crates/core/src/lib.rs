//! Query plan modelling for workload characterization.
//!
//! - [`plan`]: parse `EXPLAIN` JSON documents into normalized operator trees,
//!   separate metric labels, and build per-node feature vectors.
//! - [`linearize`]: deterministic DFS-bracket token sequences and vocabularies.
//! - [`smatch`]: Smatch similarity between plan trees.
//! - [`catalog`]: catalog statistics (`f_meta`) and database settings (`f_db`).
//! - [`datagen`]: Latin Hypercube configuration sampling, synthetic plan corpora
//!   with an analytic cost oracle, and scored plan-pair datasets.

pub mod catalog;
pub mod datagen;
pub mod linearize;
pub mod plan;
pub mod smatch;

pub use plan::{
    extract_labels, extract_node_features, operator_group, parse_plan_document, MetricLabels,
    OperatorGroup, OperatorTriple, PlanNode, PlanTree,
};

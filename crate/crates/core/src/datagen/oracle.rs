//! Analytic label oracle for synthetic plans.
//!
//! Labels are a function of stored node properties and the configuration only,
//! so any corpus can be relabeled and audited from its own records.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::catalog::DbConfig;
use crate::plan::{MetricLabels, PlanNode};

/// Per-operator time coefficients, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCoefficients {
    pub hit_page_ms: f64,
    pub read_page_ms: f64,
    pub cpu_tuple_ms: f64,
    pub cpu_index_ms: f64,
    pub hash_tuple_ms: f64,
    pub join_tuple_ms: f64,
    pub nested_loop_factor: f64,
    pub sort_tuple_ms: f64,
    pub agg_tuple_ms: f64,
    pub spill_weight: f64,
    pub random_weight: f64,
    pub io_weight: f64,
    pub node_overhead_ms: f64,
    pub pipelined_startup_fraction: f64,
}

impl Default for OracleCoefficients {
    fn default() -> Self {
        Self {
            hit_page_ms: 0.002,
            read_page_ms: 0.2,
            cpu_tuple_ms: 0.0005,
            cpu_index_ms: 0.002,
            hash_tuple_ms: 0.001,
            join_tuple_ms: 0.0008,
            nested_loop_factor: 2.0,
            sort_tuple_ms: 0.0003,
            agg_tuple_ms: 0.0006,
            spill_weight: 1.0,
            random_weight: 0.2,
            io_weight: 0.2,
            node_overhead_ms: 0.05,
            pipelined_startup_fraction: 0.1,
        }
    }
}

impl OracleCoefficients {
    /// Multiplies every time coefficient by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            hit_page_ms: self.hit_page_ms * k,
            read_page_ms: self.read_page_ms * k,
            cpu_tuple_ms: self.cpu_tuple_ms * k,
            cpu_index_ms: self.cpu_index_ms * k,
            hash_tuple_ms: self.hash_tuple_ms * k,
            join_tuple_ms: self.join_tuple_ms * k,
            sort_tuple_ms: self.sort_tuple_ms * k,
            agg_tuple_ms: self.agg_tuple_ms * k,
            node_overhead_ms: self.node_overhead_ms * k,
            ..self.clone()
        }
    }
}

/// Human-readable statement of the oracle, stored in corpus headers.
pub const ORACLE_FORMULA: &str = "\
Per node, with H = Shared Hit Blocks, D = Shared Read Blocks, P = H + D, R = Actual Rows, \
W = Plan Width, X = Rows Removed by Filter, Rin = sum of children's Actual Rows, \
wm = work_mem, spill(b) = 1 + spill_weight * ln(1 + b / wm), \
rf = 1 + random_weight * ln(1 + random_page_cost / 1000), \
cf = 1 - 0.5 * effective_cache_size / (effective_cache_size + 8192 * P), \
io = 1 / (1 + io_weight * ln(1 + effective_io_concurrency)): \
own time = node_overhead_ms + \
Seq Scan: H*hit_page_ms + D*read_page_ms + (R + X)*cpu_tuple_ms; \
Index Scan, Index Only Scan: H*hit_page_ms + D*read_page_ms*rf*cf + R*cpu_index_ms; \
Bitmap Index Scan: R*cpu_index_ms; \
Bitmap Heap Scan: H*hit_page_ms + D*read_page_ms*io + (R + X)*cpu_tuple_ms; \
Hash: Rin*hash_tuple_ms*spill(Rin*W); \
Hash Join, Merge Join: Rin*join_tuple_ms + R*cpu_tuple_ms; \
Nested Loop: nested_loop_factor*Rin*join_tuple_ms + R*cpu_tuple_ms; \
Sort: Rin*log2(Rin + 2)*sort_tuple_ms*spill(Rin*W); \
Aggregate: Rin*agg_tuple_ms, times spill(R*W) when Strategy = Hashed; \
otherwise: Rin*cpu_tuple_ms. \
Actual Total Time = sum of children's total times + own time. \
Actual Startup Time = sum of children's total times + own time for Sort, Hash and Aggregate; \
otherwise max of children's startup times + pipelined_startup_fraction * own time. \
Total Cost = sum of children's costs + P*(4 for index scans, else 1) + Plan Rows*cpu_tuple_cost \
+ 0.0025*(sum of children's Plan Rows), plus 0.02*Plan Rows*log2(Plan Rows + 2) for Sort.";

fn num(node: &PlanNode, key: &str) -> f64 {
    node.properties.get(key).and_then(Value::as_f64).unwrap_or(0.0)
}

/// Time spent in the node itself.
pub fn own_time(node: &PlanNode, child_rows: f64, config: &DbConfig, c: &OracleCoefficients) -> f64 {
    let hit = num(node, "Shared Hit Blocks");
    let read = num(node, "Shared Read Blocks");
    let pages = hit + read;
    let rows = num(node, "Actual Rows");
    let width = num(node, "Plan Width");
    let removed = num(node, "Rows Removed by Filter");
    let wm = config.get("work_mem").max(1.0);
    let spill = |bytes: f64| 1.0 + c.spill_weight * (1.0 + bytes / wm).ln();
    let rf = 1.0 + c.random_weight * (1.0 + config.get("random_page_cost") / 1000.0).ln();
    let ecs = config.get("effective_cache_size");
    let cf = 1.0 - 0.5 * ecs / (ecs + 8192.0 * pages);
    let io = 1.0 / (1.0 + c.io_weight * (1.0 + config.get("effective_io_concurrency")).ln());
    let body = match node.raw_name.as_str() {
        "Seq Scan" => hit * c.hit_page_ms + read * c.read_page_ms + (rows + removed) * c.cpu_tuple_ms,
        "Index Scan" | "Index Only Scan" => {
            hit * c.hit_page_ms + read * c.read_page_ms * rf * cf + rows * c.cpu_index_ms
        }
        "Bitmap Index Scan" => rows * c.cpu_index_ms,
        "Bitmap Heap Scan" => {
            hit * c.hit_page_ms + read * c.read_page_ms * io + (rows + removed) * c.cpu_tuple_ms
        }
        "Hash" => child_rows * c.hash_tuple_ms * spill(child_rows * width),
        "Hash Join" | "Merge Join" => child_rows * c.join_tuple_ms + rows * c.cpu_tuple_ms,
        "Nested Loop" => {
            c.nested_loop_factor * child_rows * c.join_tuple_ms + rows * c.cpu_tuple_ms
        }
        "Sort" => child_rows * (child_rows + 2.0).log2() * c.sort_tuple_ms * spill(child_rows * width),
        "Aggregate" => {
            let hashed = node.properties.get("Strategy").and_then(Value::as_str) == Some("Hashed");
            child_rows * c.agg_tuple_ms * if hashed { spill(rows * width) } else { 1.0 }
        }
        _ => child_rows * c.cpu_tuple_ms,
    };
    c.node_overhead_ms + body
}

fn own_cost(node: &PlanNode, child_plan_rows: f64, config: &DbConfig) -> f64 {
    let pages = num(node, "Shared Hit Blocks") + num(node, "Shared Read Blocks");
    let plan_rows = num(node, "Plan Rows");
    let page_weight = match node.raw_name.as_str() {
        "Index Scan" | "Index Only Scan" | "Bitmap Index Scan" => 4.0,
        _ => 1.0,
    };
    let mut cost = pages * page_weight + plan_rows * config.get("cpu_tuple_cost") + 0.0025 * child_plan_rows;
    if node.raw_name == "Sort" {
        cost += 0.02 * plan_rows * (plan_rows + 2.0).log2();
    }
    cost
}

fn is_blocking(node: &PlanNode) -> bool {
    matches!(node.raw_name.as_str(), "Sort" | "Hash" | "Aggregate")
}

/// Labels one node from its children's labels.
pub fn node_labels(node: &PlanNode, config: &DbConfig, c: &OracleCoefficients) -> MetricLabels {
    let child_rows: f64 = node.children.iter().map(|ch| num(ch, "Actual Rows")).sum();
    let child_plan_rows: f64 = node.children.iter().map(|ch| num(ch, "Plan Rows")).sum();
    let child_total: f64 = node.children.iter().map(|ch| ch.labels.total_time.unwrap_or(0.0)).sum();
    let child_cost: f64 = node.children.iter().map(|ch| ch.labels.total_cost.unwrap_or(0.0)).sum();
    let own = own_time(node, child_rows, config, c);
    let total = child_total + own;
    let startup = if is_blocking(node) {
        total
    } else {
        let first = node
            .children
            .iter()
            .map(|ch| ch.labels.startup_time.unwrap_or(0.0))
            .fold(0.0, f64::max);
        first + c.pipelined_startup_fraction * own
    };
    MetricLabels {
        total_cost: Some(child_cost + own_cost(node, child_plan_rows, config)),
        total_time: Some(total),
        startup_time: Some(startup),
    }
}

/// Recomputes every label in the subtree, bottom-up.
pub fn label_tree(node: &mut PlanNode, config: &DbConfig, c: &OracleCoefficients) {
    for ch in &mut node.children {
        label_tree(ch, config, c);
    }
    node.labels = node_labels(node, config, c);
}

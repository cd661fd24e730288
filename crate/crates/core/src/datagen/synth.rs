//! Synthetic plan generator.
//!
//! A plan is first drawn as a [`PlanRecipe`] (relations, predicates, join tree,
//! operator choices) using only the random stream. Building the recipe under a
//! configuration is deterministic, so one recipe executed under many
//! configurations forms a query template.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::lhs::{default_ranges, lhs_configs, ConfigRange};
use super::oracle::{label_tree, OracleCoefficients};
use super::DatagenError;
use crate::catalog::{Catalog, CatalogRow, DbConfig};
use crate::linearize::linearize;
use crate::plan::{PlanNode, PlanTree, Properties};

/// Plans above this many nodes are never generated and are pruned from pair sets.
pub const MAX_PLAN_NODES: usize = 200;
/// Join outputs are clamped to this many rows.
pub const MAX_JOIN_ROWS: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub n_distinct: f64,
    pub selectivity: f64,
    pub avg_width: f64,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub tuples: f64,
    pub pages: f64,
    pub relfilenode: f64,
    pub relam: f64,
    pub attributes: Vec<AttributeSpec>,
}

/// Relative weights for scan and join methods, and probabilities for the
/// operators stacked on top of the join tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorWeights {
    pub seq_scan: f64,
    pub index_scan: f64,
    pub index_only_scan: f64,
    pub bitmap_scan: f64,
    pub hash_join: f64,
    pub merge_join: f64,
    pub nested_loop: f64,
    pub p_filter: f64,
    pub p_materialize: f64,
    pub p_gather: f64,
    pub p_aggregate: f64,
    pub p_sort: f64,
    pub p_limit: f64,
}

impl Default for OperatorWeights {
    fn default() -> Self {
        Self {
            seq_scan: 0.45,
            index_scan: 0.25,
            index_only_scan: 0.1,
            bitmap_scan: 0.2,
            hash_join: 0.5,
            merge_join: 0.2,
            nested_loop: 0.3,
            p_filter: 0.6,
            p_materialize: 0.3,
            p_gather: 0.15,
            p_aggregate: 0.6,
            p_sort: 0.5,
            p_limit: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub seed: u64,
    pub relations: Vec<RelationSpec>,
    pub weights: OperatorWeights,
    /// Relations joined per plan, drawn uniformly from this inclusive range.
    pub min_relations: usize,
    pub max_relations: usize,
    /// Probability that a join combines two arbitrary subtrees instead of
    /// extending the current left-deep chain.
    pub bushy_prob: f64,
    /// Log-normal sigma of planner row estimates around actual rows.
    pub estimate_noise: f64,
    /// Log-normal sigma of observed latency around the oracle total time.
    pub latency_noise: f64,
    pub max_nodes: usize,
    pub oracle: OracleCoefficients,
    pub config_ranges: Vec<ConfigRange>,
}

fn attr(name: &str, n_distinct: f64, selectivity: f64, avg_width: f64, correlation: f64) -> AttributeSpec {
    AttributeSpec {
        name: name.to_owned(),
        n_distinct,
        selectivity,
        avg_width,
        correlation,
    }
}

fn rel(name: &str, tuples: f64, pages: f64, relfilenode: f64, attributes: Vec<AttributeSpec>) -> RelationSpec {
    RelationSpec {
        name: name.to_owned(),
        tuples,
        pages,
        relfilenode,
        relam: 2.0,
        attributes,
    }
}

impl SyntheticSpec {
    /// A decision-support schema of eight relations.
    pub fn tpch_like(seed: u64) -> Self {
        let relations = vec![
            rel("lineitem", 60_000.0, 1_100.0, 16_401.0, vec![
                attr("l_orderkey", 15_000.0, 0.01, 4.0, 1.0),
                attr("l_partkey", 2_000.0, 0.01, 4.0, 0.0),
                attr("l_suppkey", 100.0, 0.02, 4.0, 0.0),
                attr("l_quantity", 50.0, 0.1, 8.0, 0.02),
                attr("l_shipdate", 2_500.0, 0.05, 4.0, 0.1),
                attr("l_discount", 11.0, 0.1, 8.0, 0.0),
            ]),
            rel("orders", 15_000.0, 260.0, 16_395.0, vec![
                attr("o_orderkey", 15_000.0, 0.001, 4.0, 1.0),
                attr("o_custkey", 1_000.0, 0.01, 4.0, 0.0),
                attr("o_orderdate", 2_400.0, 0.05, 4.0, 0.0),
                attr("o_totalprice", 14_900.0, 0.1, 8.0, 0.0),
            ]),
            rel("customer", 1_500.0, 35.0, 16_392.0, vec![
                attr("c_custkey", 1_500.0, 0.001, 4.0, 1.0),
                attr("c_nationkey", 25.0, 0.04, 4.0, 0.05),
                attr("c_acctbal", 1_490.0, 0.1, 8.0, 0.0),
                attr("c_mktsegment", 5.0, 0.2, 10.0, 0.2),
            ]),
            rel("part", 2_000.0, 40.0, 16_386.0, vec![
                attr("p_partkey", 2_000.0, 0.001, 4.0, 1.0),
                attr("p_size", 50.0, 0.02, 4.0, 0.0),
                attr("p_brand", 25.0, 0.04, 10.0, 0.0),
                attr("p_retailprice", 1_900.0, 0.1, 8.0, 0.3),
            ]),
            rel("partsupp", 8_000.0, 170.0, 16_389.0, vec![
                attr("ps_partkey", 2_000.0, 0.001, 4.0, 1.0),
                attr("ps_suppkey", 100.0, 0.01, 4.0, 0.0),
                attr("ps_availqty", 5_000.0, 0.1, 4.0, 0.0),
                attr("ps_supplycost", 7_000.0, 0.1, 8.0, 0.0),
            ]),
            rel("supplier", 100.0, 2.0, 16_383.0, vec![
                attr("s_suppkey", 100.0, 0.01, 4.0, 1.0),
                attr("s_nationkey", 25.0, 0.04, 4.0, 0.1),
                attr("s_acctbal", 100.0, 0.1, 8.0, 0.0),
            ]),
            rel("nation", 25.0, 1.0, 16_380.0, vec![
                attr("n_nationkey", 25.0, 0.04, 4.0, 1.0),
                attr("n_regionkey", 5.0, 0.2, 4.0, 0.4),
                attr("n_name", 25.0, 0.04, 12.0, 0.0),
            ]),
            rel("region", 5.0, 1.0, 16_377.0, vec![
                attr("r_regionkey", 5.0, 0.2, 4.0, 1.0),
                attr("r_name", 5.0, 0.2, 12.0, 1.0),
            ]),
        ];
        Self {
            name: "tpch-like".to_owned(),
            seed,
            relations,
            weights: OperatorWeights::default(),
            min_relations: 1,
            max_relations: 5,
            bushy_prob: 0.2,
            estimate_noise: 0.3,
            latency_noise: 0.02,
            max_nodes: MAX_PLAN_NODES,
            oracle: OracleCoefficients::default(),
            config_ranges: default_ranges(),
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidSpec(m));
        if self.relations.is_empty() {
            return bad("no relations".into());
        }
        if let Some(r) = self.relations.iter().find(|r| r.attributes.is_empty()) {
            return bad(format!("relation {} has no attributes", r.name));
        }
        if let Some(r) = self.relations.iter().find(|r| !(r.tuples >= 1.0 && r.pages >= 1.0)) {
            return bad(format!("relation {} needs at least one tuple and page", r.name));
        }
        if self.min_relations == 0 || self.min_relations > self.max_relations {
            return bad("relation count range is empty".into());
        }
        if self.max_relations > self.relations.len() {
            return bad("max_relations exceeds the catalog".into());
        }
        if self.max_nodes == 0 || self.max_nodes > MAX_PLAN_NODES {
            return bad(format!("max_nodes must be in 1..={MAX_PLAN_NODES}"));
        }
        let w = &self.weights;
        let all = [
            w.seq_scan, w.index_scan, w.index_only_scan, w.bitmap_scan, w.hash_join, w.merge_join,
            w.nested_loop,
        ];
        if all.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("operator weights must be non-negative".into());
        }
        if w.seq_scan + w.index_scan + w.index_only_scan + w.bitmap_scan <= 0.0
            || w.hash_join + w.merge_join + w.nested_loop <= 0.0
        {
            return bad("scan and join weights need positive mass".into());
        }
        let probs = [
            w.p_filter, w.p_materialize, w.p_gather, w.p_aggregate, w.p_sort, w.p_limit, self.bushy_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if !(self.estimate_noise >= 0.0 && self.latency_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        for r in &self.config_ranges {
            r.validate()?;
        }
        Ok(())
    }

    /// Catalog statistics of every relation attribute.
    pub fn catalog(&self) -> Catalog {
        Catalog::new(self.relations.iter().flat_map(|r| {
            r.attributes.iter().map(move |a| CatalogRow {
                relname: r.name.clone(),
                attname: a.name.clone(),
                reltuples: r.tuples,
                relpages: r.pages,
                relfilenode: r.relfilenode,
                relam: r.relam,
                n_distinct: a.n_distinct,
                distinct_values: a.n_distinct / r.tuples,
                selectivity: a.selectivity,
                avg_width: a.avg_width,
                correlation: a.correlation,
            })
        }))
    }
}

/// Perturbation that turns a spec into a related domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    /// Fraction of hash-join and seq-scan weight moved to the other methods.
    pub op_shift: f64,
    /// Multiplier on relation sizes.
    pub row_scale: f64,
    /// Multiplier on every oracle time coefficient.
    pub coeff_scale: f64,
    /// XORed into the spec seed.
    pub seed_offset: u64,
}

impl ShiftParams {
    pub fn none() -> Self {
        Self {
            op_shift: 0.0,
            row_scale: 1.0,
            coeff_scale: 1.0,
            seed_offset: 0,
        }
    }
}

pub fn domain_shift(spec: &SyntheticSpec, shift: &ShiftParams) -> SyntheticSpec {
    let mut out = spec.clone();
    let s = shift.op_shift.clamp(0.0, 1.0);
    let w = &mut out.weights;
    let moved = w.hash_join * s;
    w.hash_join -= moved;
    w.merge_join += moved / 2.0;
    w.nested_loop += moved / 2.0;
    let moved = w.seq_scan * s;
    w.seq_scan -= moved;
    w.index_scan += moved / 2.0;
    w.bitmap_scan += moved / 2.0;
    w.p_sort += s * (1.0 - w.p_sort) / 2.0;
    for r in &mut out.relations {
        r.tuples = (r.tuples * shift.row_scale).round().max(1.0);
        r.pages = (r.pages * shift.row_scale).ceil().max(1.0);
        for a in &mut r.attributes {
            a.n_distinct = a.n_distinct.min(r.tuples);
        }
    }
    out.oracle = out.oracle.scaled(shift.coeff_scale);
    out.seed ^= shift.seed_offset;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanMethod {
    Seq,
    Index,
    IndexOnly,
    Bitmap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JoinMethod {
    Hash,
    Merge,
    NestedLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JoinKind {
    Inner,
    Left,
    Semi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggStrategy {
    Plain,
    Hashed,
    Sorted,
}

/// `(relation index, attribute index)`.
pub type AttrRef = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafRecipe {
    pub rel: usize,
    pub method: ScanMethod,
    /// Filtered attribute and predicate selectivity.
    pub filter: Option<(usize, f64)>,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinRecipe {
    pub method: JoinMethod,
    pub kind: JoinKind,
    pub outer: RecipeNode,
    pub inner: RecipeNode,
    pub outer_key: AttrRef,
    pub inner_key: AttrRef,
    pub materialize_inner: bool,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RecipeNode {
    Scan(LeafRecipe),
    Join(Box<JoinRecipe>),
}

impl RecipeNode {
    pub fn relations(&self) -> Vec<usize> {
        match self {
            RecipeNode::Scan(l) => vec![l.rel],
            RecipeNode::Join(j) => {
                let mut v = j.outer.relations();
                v.extend(j.inner.relations());
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TopRecipe {
    Gather { workers: u32 },
    Aggregate { strategy: AggStrategy, key: Option<AttrRef> },
    Sort { key: AttrRef },
    Limit { count: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecipe {
    pub root: RecipeNode,
    /// Applied bottom-up above the join tree.
    pub top: Vec<TopRecipe>,
}

fn lognormal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    n.sample(rng).exp()
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[(T, f64)]) -> T {
    let dist = WeightedIndex::new(items.iter().map(|i| i.1)).expect("weights validated");
    items[dist.sample(rng)].0
}

fn scan_method(rng: &mut ChaCha8Rng, w: &OperatorWeights) -> ScanMethod {
    pick(rng, &[
        (ScanMethod::Seq, w.seq_scan),
        (ScanMethod::Index, w.index_scan),
        (ScanMethod::IndexOnly, w.index_only_scan),
        (ScanMethod::Bitmap, w.bitmap_scan),
    ])
}

fn join_method(rng: &mut ChaCha8Rng, w: &OperatorWeights) -> JoinMethod {
    pick(rng, &[
        (JoinMethod::Hash, w.hash_join),
        (JoinMethod::Merge, w.merge_join),
        (JoinMethod::NestedLoop, w.nested_loop),
    ])
}

fn filter_for(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, rel: usize) -> (usize, f64) {
    let attrs = &spec.relations[rel].attributes;
    let a = rng.gen_range(0..attrs.len());
    let sel = (attrs[a].selectivity * rng.gen_range(-1.5f64..1.5).exp()).clamp(1e-4, 1.0);
    (a, sel)
}

/// Draws the relations of one plan and their scans.
pub fn sample_leaves(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<LeafRecipe> {
    let k = rng.gen_range(spec.min_relations..=spec.max_relations);
    let rels = rand::seq::index::sample(rng, spec.relations.len(), k).into_vec();
    rels.into_iter()
        .map(|rel| {
            let method = scan_method(rng, &spec.weights);
            let filtered = method != ScanMethod::Seq || rng.gen_bool(spec.weights.p_filter);
            let filter = filtered.then(|| filter_for(rng, spec, rel));
            LeafRecipe {
                rel,
                method,
                filter,
                noise: lognormal(rng, spec.estimate_noise),
            }
        })
        .collect()
}

fn random_attr(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, rels: &[usize]) -> AttrRef {
    let r = rels[rng.gen_range(0..rels.len())];
    (r, rng.gen_range(0..spec.relations[r].attributes.len()))
}

fn key_suffix(name: &str) -> &str {
    name.split_once('_').map_or(name, |(_, s)| s)
}

/// Prefers key pairs whose column names share a suffix (`o_custkey`, `c_custkey`).
fn join_keys(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, outer: &[usize], inner: &[usize]) -> (AttrRef, AttrRef) {
    let mut matches = Vec::new();
    for &ro in outer {
        for &ri in inner {
            for (ao, a) in spec.relations[ro].attributes.iter().enumerate() {
                for (ai, b) in spec.relations[ri].attributes.iter().enumerate() {
                    if key_suffix(&a.name) == key_suffix(&b.name) {
                        matches.push(((ro, ao), (ri, ai)));
                    }
                }
            }
        }
    }
    if matches.is_empty() {
        (random_attr(rng, spec, outer), random_attr(rng, spec, inner))
    } else {
        matches[rng.gen_range(0..matches.len())]
    }
}

/// Arranges leaves into a join tree and draws the operators above it.
pub fn assemble(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, leaves: Vec<LeafRecipe>) -> PlanRecipe {
    let w = &spec.weights;
    let mut items: Vec<RecipeNode> = leaves.into_iter().map(RecipeNode::Scan).collect();
    items.shuffle(rng);
    while items.len() > 1 {
        let (i, j) = if items.len() > 2 && rng.gen_bool(spec.bushy_prob) {
            let i = rng.gen_range(0..items.len());
            let mut j = rng.gen_range(0..items.len() - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        } else {
            (0, 1)
        };
        let (hi, lo) = (i.max(j), i.min(j));
        let a = items.remove(hi);
        let b = items.remove(lo);
        let (outer, inner) = if i < j { (b, a) } else { (a, b) };
        let method = join_method(rng, w);
        let kind = pick(rng, &[(JoinKind::Inner, 0.85), (JoinKind::Left, 0.1), (JoinKind::Semi, 0.05)]);
        let (outer_key, inner_key) = join_keys(rng, spec, &outer.relations(), &inner.relations());
        let materialize_inner = method == JoinMethod::NestedLoop && rng.gen_bool(w.p_materialize);
        let noise = lognormal(rng, spec.estimate_noise);
        items.insert(
            0,
            RecipeNode::Join(Box::new(JoinRecipe {
                method,
                kind,
                outer,
                inner,
                outer_key,
                inner_key,
                materialize_inner,
                noise,
            })),
        );
    }
    let root = items.pop().expect("at least one relation");
    let rels = root.relations();
    let mut top = Vec::new();
    if rng.gen_bool(w.p_gather) {
        top.push(TopRecipe::Gather { workers: rng.gen_range(1..=4) });
    }
    if rng.gen_bool(w.p_aggregate) {
        let strategy = pick(rng, &[(AggStrategy::Plain, 0.4), (AggStrategy::Hashed, 0.4), (AggStrategy::Sorted, 0.2)]);
        let key = (strategy != AggStrategy::Plain).then(|| random_attr(rng, spec, &rels));
        top.push(TopRecipe::Aggregate { strategy, key });
    }
    if rng.gen_bool(w.p_sort) {
        top.push(TopRecipe::Sort { key: random_attr(rng, spec, &rels) });
    }
    if rng.gen_bool(w.p_limit) {
        top.push(TopRecipe::Limit { count: [1.0, 10.0, 100.0, 1000.0][rng.gen_range(0..4)] });
    }
    PlanRecipe { root, top }
}

pub fn sample_recipe(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> PlanRecipe {
    let leaves = sample_leaves(rng, spec);
    assemble(rng, spec, leaves)
}

/// Re-draws each scan and join method with probability `p` and jitters
/// predicate selectivities, keeping relations and join order.
pub fn perturb(recipe: &PlanRecipe, rng: &mut ChaCha8Rng, spec: &SyntheticSpec, p: f64) -> PlanRecipe {
    fn walk(n: &mut RecipeNode, rng: &mut ChaCha8Rng, spec: &SyntheticSpec, p: f64) {
        match n {
            RecipeNode::Scan(l) => {
                if rng.gen_bool(p) {
                    l.method = scan_method(rng, &spec.weights);
                    if l.method != ScanMethod::Seq && l.filter.is_none() {
                        l.filter = Some(filter_for(rng, spec, l.rel));
                    }
                }
                if let Some((_, sel)) = &mut l.filter {
                    *sel = (*sel * rng.gen_range(-0.3f64..0.3).exp()).clamp(1e-4, 1.0);
                }
            }
            RecipeNode::Join(j) => {
                if rng.gen_bool(p) {
                    j.method = join_method(rng, &spec.weights);
                    if j.method != JoinMethod::NestedLoop {
                        j.materialize_inner = false;
                    }
                }
                walk(&mut j.outer, rng, spec, p);
                walk(&mut j.inner, rng, spec, p);
            }
        }
    }
    let mut out = recipe.clone();
    walk(&mut out.root, rng, spec, p);
    out
}

struct Built {
    node: PlanNode,
    rows: f64,
    est: f64,
    width: f64,
}

fn alias(spec: &SyntheticSpec, rel: usize) -> String {
    let initial = spec.relations[rel].name.chars().next().unwrap_or('t');
    format!("{initial}{rel}")
}

fn qualified(spec: &SyntheticSpec, (r, a): AttrRef) -> String {
    format!("{}.{}", alias(spec, r), spec.relations[r].attributes[a].name)
}

fn count(x: f64) -> Value {
    json!(x.max(0.0).round() as u64)
}

fn node(node_type: &str, mut props: Properties, rows: f64, est: f64, width: f64, children: Vec<PlanNode>) -> PlanNode {
    props.insert("Node Type".into(), json!(node_type));
    props.insert("Actual Rows".into(), count(rows));
    props.insert("Plan Rows".into(), count(est));
    props.insert("Plan Width".into(), count(width));
    props.insert("Actual Loops".into(), json!(1));
    PlanNode::from_raw(node_type, props, children).expect("generated properties carry no labels")
}

fn props(pairs: Vec<(&str, Value)>) -> Properties {
    pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

/// Splits `pages` into shared-buffer hits and reads.
fn buffer_split(pages: f64, config: &DbConfig) -> (f64, f64) {
    let sb = config.get("shared_buffers");
    let hit = (pages * sb / (sb + 8192.0 * pages)).round();
    (hit, pages - hit)
}

fn with_buffers(mut p: Properties, pages: f64, config: &DbConfig) -> Properties {
    let (hit, read) = buffer_split(pages, config);
    p.insert("Shared Hit Blocks".into(), count(hit));
    p.insert("Shared Read Blocks".into(), count(read));
    p
}

fn build_scan(l: &LeafRecipe, spec: &SyntheticSpec, config: &DbConfig) -> Built {
    let r = &spec.relations[l.rel];
    let a = alias(spec, l.rel);
    let sel = l.filter.map_or(1.0, |f| f.1);
    let rows = (r.tuples * sel).round().max(1.0);
    let est = (rows * l.noise).round().max(1.0);
    let width: f64 = r.attributes.iter().map(|x| x.avg_width).sum();
    let cond = l.filter.map(|(attr, s)| {
        format!("({a}.{} <= {:.4})", r.attributes[attr].name, s)
    });
    let index_name = l
        .filter
        .map(|(attr, _)| format!("{}_{}_idx", r.name, r.attributes[attr].name));
    let corr = l.filter.map_or(1.0, |(attr, _)| r.attributes[attr].correlation.abs());
    let base = |extra: Vec<(&str, Value)>| {
        let mut p = props(vec![("Relation Name", json!(r.name)), ("Alias", json!(a))]);
        p.extend(extra.into_iter().map(|(k, v)| (k.to_owned(), v)));
        p
    };
    let opt = |v: &Option<String>| v.as_ref().map_or(Value::Null, |s| json!(s));
    let node = match l.method {
        ScanMethod::Seq => {
            let mut p = base(vec![("Rows Removed by Filter", count(r.tuples - rows))]);
            if let Some(c) = &cond {
                p.insert("Filter".into(), json!(c));
            }
            node("Seq Scan", with_buffers(p, r.pages, config), rows, est, width, vec![])
        }
        ScanMethod::Index | ScanMethod::IndexOnly => {
            let pages = if l.method == ScanMethod::Index {
                (rows * (1.0 - corr) + r.pages * sel * corr).min(r.pages).ceil().max(1.0)
            } else {
                (rows / 200.0).ceil() + 1.0
            };
            let p = base(vec![
                ("Index Name", opt(&index_name)),
                ("Index Cond", opt(&cond)),
                ("Scan Direction", json!("Forward")),
            ]);
            let name = if l.method == ScanMethod::Index { "Index Scan" } else { "Index Only Scan" };
            node(name, with_buffers(p, pages, config), rows, est, width, vec![])
        }
        ScanMethod::Bitmap => {
            let index_pages = (rows / 400.0).ceil() + 1.0;
            let ip = props(vec![("Index Name", opt(&index_name)), ("Index Cond", opt(&cond))]);
            let index = node("Bitmap Index Scan", with_buffers(ip, index_pages, config), rows, est, 0.0, vec![]);
            let heap_pages = (r.pages * sel * 3.0).min(r.pages).ceil().max(1.0);
            let p = base(vec![
                ("Recheck Cond", opt(&cond)),
                ("Exact Heap Blocks", count(heap_pages)),
                ("Rows Removed by Index Recheck", json!(0)),
            ]);
            node("Bitmap Heap Scan", with_buffers(p, heap_pages, config), rows, est, width, vec![index])
        }
    };
    Built { node, rows, est, width }
}

fn sort_node(child: Built, keys: Vec<String>, config: &DbConfig) -> Built {
    let bytes = child.rows * child.width;
    let wm = config.get("work_mem");
    let spills = bytes > wm;
    let mut p = props(vec![
        ("Sort Key", json!(keys)),
        ("Sort Method", json!(if spills { "external merge" } else { "quicksort" })),
        ("Sort Space Type", json!(if spills { "Disk" } else { "Memory" })),
        ("Sort Space Used", count((bytes / 1024.0).ceil())),
    ]);
    if spills {
        let blocks = count((bytes / 8192.0).ceil());
        p.insert("Temp Read Blocks".into(), blocks.clone());
        p.insert("Temp Written Blocks".into(), blocks);
    }
    let (rows, est, width) = (child.rows, child.est, child.width);
    Built {
        node: node("Sort", p, rows, est, width, vec![child.node]),
        rows,
        est,
        width,
    }
}

fn build_join(j: &JoinRecipe, spec: &SyntheticSpec, config: &DbConfig) -> Built {
    let outer = build_tree(&j.outer, spec, config);
    let inner = build_tree(&j.inner, spec, config);
    let nd = |(r, a): AttrRef| spec.relations[r].attributes[a].n_distinct.max(1.0);
    let join_sel = 1.0 / nd(j.outer_key).max(nd(j.inner_key));
    let raw = (outer.rows * inner.rows * join_sel).min(MAX_JOIN_ROWS);
    let rows = match j.kind {
        JoinKind::Inner => raw,
        JoinKind::Left => raw.max(outer.rows),
        JoinKind::Semi => raw.min(outer.rows),
    }
    .round()
    .max(1.0);
    let est = (rows * j.noise).round().max(1.0);
    let width = match j.kind {
        JoinKind::Semi => outer.width,
        _ => outer.width + inner.width,
    };
    let (ok, ik) = (qualified(spec, j.outer_key), qualified(spec, j.inner_key));
    let cond = format!("({ok} = {ik})");
    let kind = match j.kind {
        JoinKind::Inner => "Inner",
        JoinKind::Left => "Left",
        JoinKind::Semi => "Semi",
    };
    let mut p = props(vec![("Join Type", json!(kind)), ("Inner Unique", json!(false))]);
    let (name, children) = match j.method {
        JoinMethod::Hash => {
            let bytes = inner.rows * inner.width;
            let wm = config.get("work_mem");
            let batches = ((bytes / wm).ceil().max(1.0) as u64).next_power_of_two();
            let buckets = (inner.rows.max(1024.0) as u64).next_power_of_two();
            let hp = props(vec![
                ("Hash Buckets", json!(buckets)),
                ("Hash Batches", json!(batches)),
                ("Peak Memory Usage", count((bytes.min(wm) / 1024.0).ceil())),
            ]);
            let hash = node("Hash", hp, inner.rows, inner.est, inner.width, vec![inner.node]);
            p.insert("Hash Cond".into(), json!(cond));
            ("Hash Join", vec![outer.node, hash])
        }
        JoinMethod::Merge => {
            p.insert("Merge Cond".into(), json!(cond));
            let so = sort_node(outer, vec![ok], config);
            let si = sort_node(inner, vec![ik], config);
            ("Merge Join", vec![so.node, si.node])
        }
        JoinMethod::NestedLoop => {
            p.insert("Join Filter".into(), json!(cond));
            let inner_node = if j.materialize_inner {
                node("Materialize", Properties::new(), inner.rows, inner.est, inner.width, vec![inner.node])
            } else {
                inner.node
            };
            ("Nested Loop", vec![outer.node, inner_node])
        }
    };
    Built {
        node: node(name, p, rows, est, width, children),
        rows,
        est,
        width,
    }
}

fn build_tree(n: &RecipeNode, spec: &SyntheticSpec, config: &DbConfig) -> Built {
    match n {
        RecipeNode::Scan(l) => build_scan(l, spec, config),
        RecipeNode::Join(j) => build_join(j, spec, config),
    }
}

fn build_top(t: &TopRecipe, child: Built, spec: &SyntheticSpec, config: &DbConfig) -> Built {
    let attr_of = |(r, a): AttrRef| &spec.relations[r].attributes[a];
    match t {
        TopRecipe::Gather { workers } => {
            let p = props(vec![
                ("Workers Planned", json!(workers)),
                ("Workers Launched", json!(workers)),
                ("Single Copy", json!(false)),
            ]);
            let (rows, est, width) = (child.rows, child.est, child.width);
            Built { node: node("Gather", p, rows, est, width, vec![child.node]), rows, est, width }
        }
        TopRecipe::Aggregate { strategy, key } => {
            let (rows, width) = match key {
                Some(k) => (child.rows.min(attr_of(*k).n_distinct).max(1.0), attr_of(*k).avg_width + 8.0),
                None => (1.0, 8.0),
            };
            let est = match key {
                Some(k) => child.est.min(attr_of(*k).n_distinct).max(1.0),
                None => 1.0,
            };
            let name = match strategy {
                AggStrategy::Plain => "Plain",
                AggStrategy::Hashed => "Hashed",
                AggStrategy::Sorted => "Sorted",
            };
            let mut p = props(vec![("Strategy", json!(name)), ("Partial Mode", json!("Simple"))]);
            let keys: Vec<String> = key.iter().map(|k| qualified(spec, *k)).collect();
            if !keys.is_empty() {
                p.insert("Group Key".into(), json!(keys));
            }
            let input = if *strategy == AggStrategy::Sorted {
                sort_node(child, keys, config)
            } else {
                child
            };
            Built { node: node("Aggregate", p, rows, est, width, vec![input.node]), rows, est, width }
        }
        TopRecipe::Sort { key } => sort_node(child, vec![qualified(spec, *key)], config),
        TopRecipe::Limit { count: n } => {
            let (rows, est, width) = (child.rows.min(*n), child.est.min(*n), child.width);
            Built { node: node("Limit", Properties::new(), rows, est, width, vec![child.node]), rows, est, width }
        }
    }
}

fn mark_parents(n: &mut PlanNode) {
    let many = n.children.len() > 1;
    for (i, c) in n.children.iter_mut().enumerate() {
        let rel = if many && i > 0 { "Inner" } else { "Outer" };
        c.properties.insert("Parent Relationship".into(), json!(rel));
        mark_parents(c);
    }
}

/// Builds the plan of `recipe` under `config` and labels it with the oracle.
pub fn build_plan(recipe: &PlanRecipe, spec: &SyntheticSpec, config: &DbConfig) -> PlanNode {
    let mut b = build_tree(&recipe.root, spec, config);
    for t in &recipe.top {
        b = build_top(t, b, spec, config);
    }
    let mut root = b.node;
    mark_parents(&mut root);
    label_tree(&mut root, config, &spec.oracle);
    root
}

/// One generated plan, with the configuration it ran under.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPlan {
    pub id: String,
    pub config: DbConfig,
    pub tree: PlanTree,
    pub template: Option<usize>,
    pub cluster: Option<usize>,
    pub latency_ms: Option<f64>,
}

impl GeneratedPlan {
    pub fn labels(&self) -> crate::plan::MetricLabels {
        self.tree.root.labels
    }
}

const SALT_PLAN: u64 = 0x706c_616e;
const SALT_CONFIG: u64 = 0x636f_6e66;
const SALT_TEMPLATE: u64 = 0x7465_6d70;
const SALT_CLUSTER: u64 = 0x636c_7573;
const SALT_INSTANCE: u64 = 0x696e_7374;
const SALT_NOISE: u64 = 0x6e6f_6973;

/// Independent random stream `i` under `(seed, salt)`.
pub fn item_rng(seed: u64, salt: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(i);
    rng
}

fn fits(recipe: &PlanRecipe, spec: &SyntheticSpec) -> bool {
    let tree = PlanTree::new(build_plan(recipe, spec, &DbConfig::defaults()), None);
    tree.node_count <= spec.max_nodes && linearize(&tree).is_ok()
}

/// Draws recipes until one respects the node cap and the sequence cap.
fn capped_recipe(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    draw: impl Fn(&mut ChaCha8Rng) -> PlanRecipe,
) -> Result<PlanRecipe, DatagenError> {
    for _ in 0..100 {
        let r = draw(rng);
        if fits(&r, spec) {
            return Ok(r);
        }
    }
    Err(DatagenError::InvalidSpec("spec cannot produce plans within the node cap".into()))
}

/// `n` independent plans, each under its own LHS configuration.
pub fn gen_plans(spec: &SyntheticSpec, n: usize) -> Result<Vec<GeneratedPlan>, DatagenError> {
    use rayon::prelude::*;
    spec.validate()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let configs = lhs_configs(n, &spec.config_ranges, spec.seed ^ SALT_CONFIG)?;
    configs
        .into_par_iter()
        .enumerate()
        .map(|(i, config)| {
            let mut rng = item_rng(spec.seed, SALT_PLAN, i as u64);
            let recipe = capped_recipe(&mut rng, spec, |r| sample_recipe(r, spec))?;
            let id = format!("{}-{i}", spec.name);
            let tree = PlanTree::new(build_plan(&recipe, spec, &config), Some(id.clone()));
            Ok(GeneratedPlan {
                id,
                config,
                tree,
                template: None,
                cluster: None,
                latency_ms: None,
            })
        })
        .collect()
}

/// `n_templates` query templates, each run under the same `n_configs` LHS
/// configurations. Observed latency is the oracle total time with
/// log-normal measurement noise.
pub fn gen_latency_corpus(
    spec: &SyntheticSpec,
    n_templates: usize,
    n_configs: usize,
) -> Result<Vec<GeneratedPlan>, DatagenError> {
    use rayon::prelude::*;
    spec.validate()?;
    let configs = lhs_configs(n_configs, &spec.config_ranges, spec.seed ^ SALT_CONFIG)?;
    let recipes: Vec<PlanRecipe> = (0..n_templates)
        .map(|t| {
            let mut rng = item_rng(spec.seed, SALT_TEMPLATE, t as u64);
            capped_recipe(&mut rng, spec, |r| sample_recipe(r, spec))
        })
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..n_templates).flat_map(|t| (0..n_configs).map(move |c| (t, c))).collect();
    Ok(jobs
        .into_par_iter()
        .map(|(t, c)| {
            let config = configs[c].clone();
            let id = format!("{}-t{t}-c{c}", spec.name);
            let root = build_plan(&recipes[t], spec, &config);
            let mut rng = item_rng(spec.seed, SALT_NOISE, (t * n_configs + c) as u64);
            let latency = root.labels.total_time.unwrap_or(0.0) * lognormal(&mut rng, spec.latency_noise);
            GeneratedPlan {
                id: id.clone(),
                config,
                tree: PlanTree::new(root, Some(id)),
                template: Some(t),
                cluster: None,
                latency_ms: Some(latency),
            }
        })
        .collect())
}

/// Clustered templates: templates in one cluster share relations and
/// predicates but differ in join order and operator choices. Each instance
/// re-draws operator methods with probability `perturb_prob` and runs under
/// its own LHS configuration.
pub fn gen_classification_corpus(
    spec: &SyntheticSpec,
    clusters: usize,
    templates_per_cluster: usize,
    instances_per_template: usize,
    perturb_prob: f64,
) -> Result<Vec<GeneratedPlan>, DatagenError> {
    use rayon::prelude::*;
    spec.validate()?;
    if !(0.0..=1.0).contains(&perturb_prob) {
        return Err(DatagenError::InvalidSpec("perturbation probability must lie in [0, 1]".into()));
    }
    let mut recipes = Vec::with_capacity(clusters * templates_per_cluster);
    for c in 0..clusters {
        let mut crng = item_rng(spec.seed, SALT_CLUSTER, c as u64);
        let leaves = sample_leaves(&mut crng, spec);
        for j in 0..templates_per_cluster {
            let t = c * templates_per_cluster + j;
            let mut rng = item_rng(spec.seed, SALT_TEMPLATE, t as u64);
            let recipe = capped_recipe(&mut rng, spec, |r| assemble(r, spec, leaves.clone()))?;
            recipes.push((c, t, recipe));
        }
    }
    let n = recipes.len() * instances_per_template;
    if n == 0 {
        return Ok(Vec::new());
    }
    let configs = lhs_configs(n, &spec.config_ranges, spec.seed ^ SALT_CONFIG)?;
    Ok((0..n)
        .into_par_iter()
        .map(|k| {
            let (c, t, recipe) = &recipes[k / instances_per_template];
            let mut rng = item_rng(spec.seed, SALT_INSTANCE, k as u64);
            let mut inst = perturb(recipe, &mut rng, spec, perturb_prob);
            if !fits(&inst, spec) {
                inst = recipe.clone();
            }
            let config = configs[k].clone();
            let id = format!("{}-k{c}-t{t}-i{}", spec.name, k % instances_per_template);
            let root = build_plan(&inst, spec, &config);
            let latency = root.labels.total_time;
            GeneratedPlan {
                id: id.clone(),
                config,
                tree: PlanTree::new(root, Some(id)),
                template: Some(*t),
                cluster: Some(*c),
                latency_ms: latency,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{OperatorGroup, LABEL_FIELDS};

    #[test]
    fn plans_respect_caps_and_taxonomy() {
        let spec = SyntheticSpec::tpch_like(1);
        let plans = gen_plans(&spec, 200).unwrap();
        let mut groups = std::collections::BTreeSet::new();
        for p in &plans {
            assert!(p.tree.node_count <= MAX_PLAN_NODES);
            assert!(linearize(&p.tree).is_ok());
            for n in p.tree.nodes() {
                assert!(n.triple.is_valid(), "{:?}", n.triple);
                n.labels.validate().unwrap();
                assert!(LABEL_FIELDS.iter().all(|f| !n.properties.contains_key(*f)));
                groups.insert(n.group());
            }
        }
        for g in OperatorGroup::MODELED {
            assert!(groups.contains(&g), "no {g} operators generated");
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec::tpch_like(9);
        let a = gen_plans(&spec, 30).unwrap();
        let b = gen_plans(&spec, 30).unwrap();
        assert_eq!(a, b);
        let c = gen_plans(&SyntheticSpec::tpch_like(10), 30).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_shift_is_identity() {
        let spec = SyntheticSpec::tpch_like(4);
        assert_eq!(domain_shift(&spec, &ShiftParams::none()), spec);
    }

    #[test]
    fn shifted_spec_stays_valid() {
        let spec = SyntheticSpec::tpch_like(4);
        let shifted = domain_shift(&spec, &ShiftParams { op_shift: 0.5, row_scale: 3.0, coeff_scale: 1.5, seed_offset: 77 });
        shifted.validate().unwrap();
        for p in gen_plans(&shifted, 50).unwrap() {
            assert!(p.tree.nodes().iter().all(|n| n.triple.is_valid()));
        }
    }

    #[test]
    fn latency_templates_share_structure() {
        let spec = SyntheticSpec::tpch_like(2);
        let runs = gen_latency_corpus(&spec, 3, 5).unwrap();
        assert_eq!(runs.len(), 15);
        for t in 0..3 {
            let members: Vec<_> = runs.iter().filter(|r| r.template == Some(t)).collect();
            let shape: Vec<_> = members[0].tree.nodes().iter().map(|n| n.triple.clone()).collect();
            for m in &members {
                let s: Vec<_> = m.tree.nodes().iter().map(|n| n.triple.clone()).collect();
                assert_eq!(s, shape);
                assert!(m.latency_ms.unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn classification_corpus_layout() {
        let spec = SyntheticSpec::tpch_like(2);
        let runs = gen_classification_corpus(&spec, 3, 2, 4, 0.1).unwrap();
        assert_eq!(runs.len(), 24);
        for r in &runs {
            assert_eq!(r.cluster.unwrap(), r.template.unwrap() / 2);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SyntheticSpec::tpch_like(0);
        spec.max_relations = 99;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::tpch_like(0);
        spec.weights.hash_join = -1.0;
        assert!(spec.validate().is_err());
    }
}

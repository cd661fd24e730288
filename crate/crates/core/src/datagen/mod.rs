//! Desk-scale data supply: configuration sampling, synthetic labeled plans,
//! scored plan pairs and corpus files.

mod lhs;
pub mod oracle;
mod pairs;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::DbConfig;
use crate::plan::{PlanError, PlanTree};

pub use lhs::{default_ranges, lhs_configs, ConfigRange, Scale};
pub use oracle::{label_tree, OracleCoefficients, ORACLE_FORMULA};
pub use pairs::{build_pair_dataset, PairDataset, ScoreSummary, ScoredPair, Split, Splits, IDENTITY_FRACTION};
pub use synth::{
    assemble, build_plan, domain_shift, gen_classification_corpus, gen_latency_corpus, gen_plans, item_rng,
    perturb, sample_leaves, sample_recipe, AggStrategy, AttributeSpec, GeneratedPlan, JoinKind, JoinMethod,
    OperatorWeights, PlanRecipe, RelationSpec, ScanMethod, ShiftParams, SyntheticSpec, MAX_JOIN_ROWS,
    MAX_PLAN_NODES,
};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid range for {name}: {reason}")]
    InvalidRange { name: String, reason: String },
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("only {eligible} plans are eligible, need at least {needed}")]
    InsufficientPlans { eligible: usize, needed: usize },
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },
    #[error(transparent)]
    Plan(#[from] PlanError),
}

pub const CORPUS_FORMAT: &str = "qplan-corpus/1";

/// First record of a corpus file: everything needed to audit or regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub kind: String,
    pub seed: u64,
    pub count: usize,
    pub spec: SyntheticSpec,
    pub oracle_formula: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl CorpusHeader {
    pub fn new(kind: &str, spec: &SyntheticSpec, count: usize) -> Self {
        Self {
            format: CORPUS_FORMAT.to_owned(),
            kind: kind.to_owned(),
            seed: spec.seed,
            count,
            spec: spec.clone(),
            oracle_formula: ORACLE_FORMULA.to_owned(),
            params: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    config: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latency_ms: Option<f64>,
    plan: Value,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: CorpusHeader,
}

/// JSONL corpus: a header line, then one record per plan.
pub fn write_corpus(header: &CorpusHeader, plans: &[GeneratedPlan]) -> String {
    let mut out = serde_json::to_string(&HeaderLine { header: header.clone() }).expect("header serializes");
    out.push('\n');
    for p in plans {
        let rec = Record {
            id: p.id.clone(),
            config: p.config.settings.clone(),
            template: p.template,
            cluster: p.cluster,
            latency_ms: p.latency_ms,
            plan: p.tree.to_canonical_value(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_corpus(text: &str) -> Result<(CorpusHeader, Vec<GeneratedPlan>), DatagenError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(DatagenError::Corpus {
        line: 1,
        msg: "empty corpus".into(),
    })?;
    let header: HeaderLine = serde_json::from_str(first).map_err(|e| DatagenError::Corpus {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.header.format != CORPUS_FORMAT {
        return Err(DatagenError::Corpus {
            line: 1,
            msg: format!("unsupported format {:?}", header.header.format),
        });
    }
    let mut plans = Vec::new();
    for (i, line) in lines {
        let rec: Record = serde_json::from_str(line).map_err(|e| DatagenError::Corpus {
            line: i + 1,
            msg: e.to_string(),
        })?;
        plans.push(GeneratedPlan {
            id: rec.id,
            config: DbConfig { settings: rec.config },
            tree: PlanTree::from_canonical_value(rec.plan)?,
            template: rec.template,
            cluster: rec.cluster,
            latency_ms: rec.latency_ms,
        });
    }
    Ok((header.header, plans))
}

//! Catalog statistics (meta features) and database settings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::plan::{PlanNode, PlanTree};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("config line {line}: {msg}")]
    BadSetting { line: usize, msg: String },
    #[error("missing setting {0}")]
    MissingSetting(String),
}

/// One statistics row, keyed by `(relname, attname)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogRow {
    pub relname: String,
    pub attname: String,
    pub reltuples: f64,
    pub relpages: f64,
    pub relfilenode: f64,
    pub relam: f64,
    pub n_distinct: f64,
    pub distinct_values: f64,
    pub selectivity: f64,
    pub avg_width: f64,
    pub correlation: f64,
}

/// Names of the `f_meta` slots, in order. The last two are the count of
/// resolved relations and a flag for references the catalog could not resolve.
pub const META_FEATURES: [&str; 11] = [
    "reltuples",
    "relpages",
    "relfilenode",
    "relam",
    "n_distinct",
    "distinct_values",
    "selectivity",
    "avg_width",
    "correlation",
    "relation_count",
    "unknown_relation",
];

pub const META_WIDTH: usize = META_FEATURES.len();

impl CatalogRow {
    fn relation_part(&self) -> [f64; 4] {
        [self.reltuples, self.relpages, self.relfilenode, self.relam]
    }

    fn attribute_part(&self) -> [f64; 5] {
        [
            self.n_distinct,
            self.distinct_values,
            self.selectivity,
            self.avg_width,
            self.correlation,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    rows: BTreeMap<(String, String), CatalogRow>,
}

impl Catalog {
    pub fn new(rows: impl IntoIterator<Item = CatalogRow>) -> Self {
        Self {
            rows: rows
                .into_iter()
                .map(|r| ((r.relname.clone(), r.attname.clone()), r))
                .collect(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &CatalogRow> {
        self.rows.values()
    }

    pub fn get(&self, rel: &str, att: &str) -> Option<&CatalogRow> {
        self.rows.get(&(rel.to_owned(), att.to_owned()))
    }

    fn any_of(&self, rel: &str) -> Option<&CatalogRow> {
        self.rows
            .range((rel.to_owned(), String::new())..)
            .next()
            .filter(|((r, _), _)| r == rel)
            .map(|(_, row)| row)
    }

    pub fn has_relation(&self, rel: &str) -> bool {
        self.any_of(rel).is_some()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CatalogError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: CatalogRow = serde_json::from_str(line).map_err(|e| CatalogError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
        Ok(Self::new(rows))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.rows.values() {
            out.push_str(&serde_json::to_string(r).expect("catalog rows serialize"));
            out.push('\n');
        }
        out
    }

    /// Sums the statistics of every `(relation, attribute)` the given nodes
    /// reference. Relations referenced without any attribute contribute their
    /// relation-level statistics once.
    pub fn meta_features(&self, refs: &References) -> Vec<f64> {
        let mut v = vec![0.0; META_WIDTH];
        let mut unknown = false;
        let mut relations = BTreeSet::new();
        for (rel, att) in &refs.attributes {
            match self.get(rel, att) {
                Some(row) => {
                    if relations.insert(rel.clone()) {
                        add(&mut v[0..4], &row.relation_part());
                    }
                    add(&mut v[4..9], &row.attribute_part());
                }
                None => unknown = true,
            }
        }
        for rel in &refs.relations {
            if relations.contains(rel) {
                continue;
            }
            match self.any_of(rel) {
                Some(row) => {
                    relations.insert(rel.clone());
                    add(&mut v[0..4], &row.relation_part());
                }
                None => unknown = true,
            }
        }
        v[9] = relations.len() as f64;
        v[10] = f64::from(u8::from(unknown));
        v
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Relations and `(relation, attribute)` pairs referenced by some plan nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct References {
    pub relations: BTreeSet<String>,
    pub attributes: BTreeSet<(String, String)>,
}

impl References {
    pub fn extend(&mut self, other: &References) {
        self.relations.extend(other.relations.iter().cloned());
        self.attributes.extend(other.attributes.iter().cloned());
    }
}

/// Property keys whose text may mention `alias.column` references.
pub const CONDITION_KEYS: [&str; 8] = [
    "Hash Cond",
    "Merge Cond",
    "Join Filter",
    "Index Cond",
    "Recheck Cond",
    "Filter",
    "Sort Key",
    "Group Key",
];

/// Alias-to-relation map over a whole plan, from scan nodes' `Alias` and
/// `Relation Name` properties.
pub fn alias_map(tree: &PlanTree) -> HashMap<String, String> {
    let mut m = HashMap::new();
    for n in tree.nodes() {
        if let Some(rel) = n.properties.get("Relation Name").and_then(Value::as_str) {
            m.insert(rel.to_owned(), rel.to_owned());
            if let Some(alias) = n.properties.get("Alias").and_then(Value::as_str) {
                m.insert(alias.to_owned(), rel.to_owned());
            }
        }
    }
    m
}

/// References made by one node: its `Relation Name` and every `alias.column`
/// in its condition-like properties whose alias resolves.
pub fn node_references(node: &PlanNode, aliases: &HashMap<String, String>) -> References {
    let mut refs = References::default();
    let own_rel = node.properties.get("Relation Name").and_then(Value::as_str);
    if let Some(rel) = own_rel {
        refs.relations.insert(rel.to_owned());
    }
    let mut texts = Vec::new();
    for key in CONDITION_KEYS {
        match node.properties.get(key) {
            Some(Value::String(s)) => texts.push(s.as_str()),
            Some(Value::Array(items)) => texts.extend(items.iter().filter_map(Value::as_str)),
            _ => {}
        }
    }
    for text in texts {
        for (qual, col) in qualified_names(text) {
            match aliases.get(qual) {
                Some(rel) => {
                    refs.attributes.insert((rel.clone(), col.to_owned()));
                }
                None => {
                    refs.relations.insert(qual.to_owned());
                }
            }
        }
        // Unqualified columns in a scan's own filter belong to its relation.
        if let Some(rel) = own_rel {
            for col in unqualified_names(text) {
                refs.attributes.insert((rel.to_owned(), col.to_owned()));
            }
        }
    }
    refs
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn identifiers(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (start, is_ident_char(c) || c == '.') {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

fn in_quotes(text: &str, pos: usize) -> bool {
    text[..pos].matches('\'').count() % 2 == 1
}

fn qualified_names(text: &str) -> Vec<(&str, &str)> {
    identifiers(text)
        .into_iter()
        .filter(|(pos, _)| !in_quotes(text, *pos))
        .filter_map(|(_, w)| {
            let (q, c) = w.split_once('.')?;
            let ok = |s: &str| !s.is_empty() && s.chars().next().is_some_and(|ch| ch.is_ascii_alphabetic() || ch == '_');
            (ok(q) && ok(c) && !c.contains('.')).then_some((q, c))
        })
        .collect()
}

fn unqualified_names(text: &str) -> Vec<&str> {
    const KEYWORDS: [&str; 8] = ["AND", "OR", "NOT", "NULL", "IS", "IN", "LIKE", "ANY"];
    identifiers(text)
        .into_iter()
        .filter(|(pos, _)| !in_quotes(text, *pos))
        .map(|(_, w)| w)
        .filter(|w| !w.contains('.'))
        .filter(|w| w.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_'))
        .filter(|w| !KEYWORDS.contains(&w.to_ascii_uppercase().as_str()))
        .collect()
}

/// Units in which settings are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Ms,
    Integer,
    Bytes,
    Number,
}

/// The database settings used as `f_db`, in vector order, with units and
/// the value used when a configuration does not mention them.
pub const SETTINGS: [(&str, Unit, f64); 18] = [
    ("bgwriter_delay", Unit::Ms, 200.0),
    ("shared_buffers", Unit::Bytes, 134_217_728.0),
    ("bgwriter_lru_maxpages", Unit::Integer, 100.0),
    ("wal_buffers", Unit::Bytes, 4_194_304.0),
    ("random_page_cost", Unit::Number, 4.0),
    ("bgwriter_lru_multiplier", Unit::Number, 2.0),
    ("checkpoint_completion_target", Unit::Number, 0.9),
    ("checkpoint_timeout", Unit::Ms, 300.0),
    ("cpu_tuple_cost", Unit::Number, 0.01),
    ("max_stack_depth", Unit::Integer, 2048.0),
    ("deadlock_timeout", Unit::Ms, 1000.0),
    ("default_statistics_target", Unit::Integer, 100.0),
    ("work_mem", Unit::Bytes, 4_194_304.0),
    ("effective_cache_size", Unit::Bytes, 4_294_967_296.0),
    ("effective_io_concurrency", Unit::Integer, 1.0),
    ("join_collapse_limit", Unit::Integer, 8.0),
    ("from_collapse_limit", Unit::Integer, 8.0),
    ("maintenance_work_mem", Unit::Bytes, 67_108_864.0),
];

pub fn setting_unit(name: &str) -> Option<Unit> {
    SETTINGS.iter().find(|s| s.0 == name).map(|s| s.1)
}

/// A database configuration: setting name to numeric value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DbConfig {
    pub settings: BTreeMap<String, f64>,
}

impl DbConfig {
    pub fn defaults() -> Self {
        Self {
            settings: SETTINGS.iter().map(|(n, _, v)| ((*n).to_owned(), *v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> f64 {
        self.settings
            .get(name)
            .copied()
            .or_else(|| SETTINGS.iter().find(|s| s.0 == name).map(|s| s.2))
            .unwrap_or(0.0)
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.settings.insert(name.to_owned(), value);
    }

    /// `f_db` in [`SETTINGS`] order; unset settings take their default.
    pub fn feature_vector(&self) -> Vec<f64> {
        SETTINGS.iter().map(|(n, _, _)| self.get(n)).collect()
    }

    /// `key = value` lines, values in their base unit with full precision.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.settings {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses `key = value` lines; `#` starts a comment. Unit suffixes
    /// `ms`, `s`, `kB`, `MB`, `GB` are accepted.
    pub fn from_kv(text: &str) -> Result<Self, CatalogError> {
        let mut settings = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CatalogError::BadSetting {
                line: i + 1,
                msg: "expected key = value".into(),
            })?;
            let value = parse_quantity(v.trim().trim_matches('\'')).ok_or_else(|| {
                CatalogError::BadSetting {
                    line: i + 1,
                    msg: format!("bad value {:?}", v.trim()),
                }
            })?;
            settings.insert(k.trim().to_owned(), value);
        }
        Ok(Self { settings })
    }
}

fn parse_quantity(s: &str) -> Option<f64> {
    const SUFFIXES: [(&str, f64); 6] = [
        ("kB", 1024.0),
        ("MB", 1024.0 * 1024.0),
        ("GB", 1024.0 * 1024.0 * 1024.0),
        ("ms", 1.0),
        ("min", 60_000.0),
        ("s", 1000.0),
    ];
    for (suffix, mult) in SUFFIXES {
        if let Some(num) = s.strip_suffix(suffix) {
            return num.trim().parse::<f64>().ok().map(|x| x * mult);
        }
    }
    s.parse().ok()
}

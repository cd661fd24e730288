//! Three-level operator taxonomy and raw operator name normalization.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Properties;

pub const NIL: &str = "NIL";
pub const UNK: &str = "UNK";
pub const BR_OPEN: &str = "BR_OPEN";
pub const BR_CLOSE: &str = "BR_CLOSE";
pub const CLS: &str = "CLS";
pub const SEP: &str = "SEP";

/// Tokens with reserved ids in every level of a vocabulary, in id order.
pub const RESERVED: [&str; 6] = [NIL, UNK, BR_OPEN, BR_CLOSE, CLS, SEP];

/// Functional operator types. `Filter` and `Group` are carried so that the
/// worked plans from the literature normalize without falling back to UNK.
pub const LEVEL1: &[&str] = &[
    "Aggregate",
    "Append",
    "Count",
    "Delete",
    "Enum",
    "Filter",
    "Gather",
    "Group",
    "GroupAggregate",
    "Hash",
    "Insert",
    "Intersect",
    "Join",
    "Limit",
    "LockRows",
    "Loop",
    "Materialize",
    "ModifyTable",
    "Network",
    "Result",
    "Scan",
    "Sequence",
    "Set",
    "Sort",
    "Union",
    "Unique",
    "Update",
    "Window",
    "WindowAgg",
];

/// Strategy types.
pub const LEVEL2: &[&str] = &[
    "And",
    "CTE",
    "Except",
    "Exists",
    "Foreign",
    "Hash",
    "Heap",
    "Index",
    "IndexOnly",
    "LoopHash",
    "Merge",
    "Or",
    "Query",
    "Quick",
    "Seq",
    "SetOp",
    "Subquery",
    "Table",
    "WorkTable",
];

/// Variant modifiers. `Nested` marks nested-loop joins.
pub const LEVEL3: &[&str] = &[
    "Anti", "Bitmap", "Full", "Left", "Nested", "Parallel", "Partial", "Partition", "Right", "Semi",
    "XN",
];

/// Subtype level within a triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L1, Level::L2, Level::L3];

    /// Non-reserved tokens of this level.
    pub fn tokens(self) -> &'static [&'static str] {
        match self {
            Level::L1 => LEVEL1,
            Level::L2 => LEVEL2,
            Level::L3 => LEVEL3,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Level::L1 => 0,
            Level::L2 => 1,
            Level::L3 => 2,
        }
    }
}

/// A normalized operator identifier `Level1-Level2-Level3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OperatorTriple {
    pub level1: String,
    pub level2: String,
    pub level3: String,
}

impl OperatorTriple {
    pub fn new(level1: &str, level2: &str, level3: &str) -> Self {
        Self {
            level1: level1.to_owned(),
            level2: level2.to_owned(),
            level3: level3.to_owned(),
        }
    }

    pub fn special(token: &str) -> Self {
        Self::new(token, NIL, NIL)
    }

    pub fn unknown() -> Self {
        Self::new(UNK, NIL, NIL)
    }

    pub fn get(&self, level: Level) -> &str {
        match level {
            Level::L1 => &self.level1,
            Level::L2 => &self.level2,
            Level::L3 => &self.level3,
        }
    }

    pub fn is_special(&self) -> bool {
        matches!(self.level1.as_str(), BR_OPEN | BR_CLOSE | CLS | SEP)
    }

    pub fn is_open(&self) -> bool {
        self.level1 == BR_OPEN
    }

    pub fn is_close(&self) -> bool {
        self.level1 == BR_CLOSE
    }

    /// Checks the taxonomy invariants: level tokens come from their vocabulary
    /// (or NIL/UNK), and specials carry NIL at levels 2 and 3.
    pub fn is_valid(&self) -> bool {
        if self.is_special() {
            return self.level2 == NIL && self.level3 == NIL;
        }
        let ok = |tok: &str, level: Level, nil_ok: bool| {
            tok == UNK || (nil_ok && tok == NIL) || level.tokens().contains(&tok)
        };
        ok(&self.level1, Level::L1, false)
            && ok(&self.level2, Level::L2, true)
            && ok(&self.level3, Level::L3, true)
    }

    /// Renders as `L1-L2-L3` with NIL segments left empty.
    pub fn render(&self) -> String {
        self.to_string()
    }

    /// Inverse of [`OperatorTriple::render`].
    pub fn parse_rendered(text: &str) -> Option<Self> {
        let mut parts = text.split('-');
        let l1 = parts.next()?;
        let l2 = parts.next()?;
        let l3 = parts.next()?;
        if parts.next().is_some() || l1.is_empty() {
            return None;
        }
        fn seg(s: &str) -> &str {
            if s.is_empty() {
                NIL
            } else {
                s
            }
        }
        Some(Self::new(l1, seg(l2), seg(l3)))
    }
}

impl fmt::Display for OperatorTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seg = |s: &str| if s == NIL { "" } else { s }.to_owned();
        write!(
            f,
            "{}-{}-{}",
            seg(&self.level1),
            seg(&self.level2),
            seg(&self.level3)
        )
    }
}

impl Serialize for OperatorTriple {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for OperatorTriple {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        OperatorTriple::parse_rendered(&text)
            .ok_or_else(|| serde::de::Error::custom(format!("malformed operator triple {text:?}")))
    }
}

/// Coarse functional family used by the performance encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorGroup {
    Scan,
    Join,
    Sort,
    Aggregate,
    Others,
}

impl OperatorGroup {
    pub const ALL: [OperatorGroup; 5] = [
        OperatorGroup::Scan,
        OperatorGroup::Join,
        OperatorGroup::Sort,
        OperatorGroup::Aggregate,
        OperatorGroup::Others,
    ];

    /// The four groups that have performance models, in embedding order.
    pub const MODELED: [OperatorGroup; 4] = [
        OperatorGroup::Scan,
        OperatorGroup::Join,
        OperatorGroup::Sort,
        OperatorGroup::Aggregate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorGroup::Scan => "scan",
            OperatorGroup::Join => "join",
            OperatorGroup::Sort => "sort",
            OperatorGroup::Aggregate => "aggregate",
            OperatorGroup::Others => "others",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for OperatorGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn operator_group(triple: &OperatorTriple) -> OperatorGroup {
    match triple.level1.as_str() {
        "Scan" => OperatorGroup::Scan,
        "Join" | "Loop" => OperatorGroup::Join,
        "Sort" => OperatorGroup::Sort,
        "Aggregate" | "GroupAggregate" | "WindowAgg" => OperatorGroup::Aggregate,
        _ => OperatorGroup::Others,
    }
}

/// Problems met while normalizing an operator name. Normalization itself never fails.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NormalizeWarning {
    UnknownOperator(String),
    UnknownSubtype { level: Level, token: String },
}

impl fmt::Display for NormalizeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormalizeWarning::UnknownOperator(name) => write!(f, "unknown operator {name:?}"),
            NormalizeWarning::UnknownSubtype { level, token } => {
                write!(f, "unknown {level:?} subtype {token:?}")
            }
        }
    }
}

/// Maps a raw engine operator name plus its properties onto the taxonomy.
/// Unknown names yield `UNK-NIL-NIL`; the warning is logged.
pub fn normalize_operator(raw_name: &str, properties: &Properties) -> OperatorTriple {
    let (triple, warnings) = normalize_operator_with_warnings(raw_name, properties);
    for w in warnings {
        log::warn!("{w}");
    }
    triple
}

const JOIN_MODIFIERS: [&str; 5] = ["Left", "Right", "Full", "Semi", "Anti"];

pub fn normalize_operator_with_warnings(
    raw_name: &str,
    properties: &Properties,
) -> (OperatorTriple, Vec<NormalizeWarning>) {
    let mut warnings = Vec::new();
    let mut words: Vec<&str> = raw_name.split_whitespace().collect();

    // Modifiers that may be spelled into the name ("Parallel Seq Scan", "Hash Left Join").
    let mut take = |w: &str| -> bool {
        if let Some(pos) = words.iter().position(|x| x.eq_ignore_ascii_case(w)) {
            words.remove(pos);
            true
        } else {
            false
        }
    };
    let parallel_word = take("Parallel");
    let partial_word = take("Partial");
    let _ = take("Finalize");
    let mut join_word = None;
    for m in JOIN_MODIFIERS {
        if take(m) {
            join_word = Some(m);
            break;
        }
    }
    let _ = take("Inner");
    let base = words.join(" ");

    let prop_str = |key: &str| properties.get(key).and_then(Value::as_str);
    let prop_true = |key: &str| properties.get(key).and_then(Value::as_bool) == Some(true);

    let join_type = join_word.or_else(|| {
        prop_str("Join Type").and_then(|jt| JOIN_MODIFIERS.into_iter().find(|m| m.eq_ignore_ascii_case(jt)))
    });

    let (l1, l2, mut l3): (&str, &str, &str) = match base.as_str() {
        "Seq Scan" => ("Scan", "Seq", NIL),
        "Index Scan" => ("Scan", "Index", NIL),
        "Index Only Scan" => ("Scan", "IndexOnly", NIL),
        "Bitmap Heap Scan" => ("Scan", "Heap", "Bitmap"),
        "Bitmap Index Scan" => ("Scan", "Index", "Bitmap"),
        "Subquery Scan" => ("Scan", "Subquery", NIL),
        "CTE Scan" => ("Scan", "CTE", NIL),
        "WorkTable Scan" => ("Scan", "WorkTable", NIL),
        "Foreign Scan" => ("Scan", "Foreign", NIL),
        "Table Function Scan" | "Function Scan" | "Values Scan" | "Named Tuplestore Scan" => {
            ("Scan", "Table", NIL)
        }
        "Tid Scan" | "Sample Scan" | "Custom Scan" => {
            warnings.push(NormalizeWarning::UnknownSubtype {
                level: Level::L2,
                token: base.clone(),
            });
            ("Scan", UNK, NIL)
        }
        "Hash Join" => ("Join", "Hash", NIL),
        "Merge Join" => ("Join", "Merge", NIL),
        "Nested Loop" => ("Loop", NIL, "Nested"),
        "Hash" => ("Hash", NIL, NIL),
        "Sort" => ("Sort", NIL, NIL),
        "Incremental Sort" => ("Sort", NIL, "Partial"),
        "Aggregate" => match prop_str("Strategy") {
            Some("Hashed") | Some("Mixed") => ("Aggregate", "Hash", NIL),
            Some("Sorted") => ("GroupAggregate", NIL, NIL),
            _ => ("Aggregate", NIL, NIL),
        },
        "HashAggregate" => ("Aggregate", "Hash", NIL),
        "GroupAggregate" => ("GroupAggregate", NIL, NIL),
        "Group" => ("Group", NIL, NIL),
        "WindowAgg" => ("WindowAgg", NIL, NIL),
        "Window" => ("Window", NIL, NIL),
        "Gather" => ("Gather", NIL, NIL),
        "Gather Merge" => ("Gather", "Merge", NIL),
        "Append" => ("Append", NIL, NIL),
        "Merge Append" => ("Append", "Merge", NIL),
        "Recursive Union" => ("Union", NIL, NIL),
        "Union" => ("Union", NIL, NIL),
        "Limit" => ("Limit", NIL, NIL),
        "LockRows" => ("LockRows", NIL, NIL),
        "Materialize" | "Memoize" => ("Materialize", NIL, NIL),
        "Result" | "ProjectSet" => ("Result", NIL, NIL),
        "Unique" => ("Unique", NIL, NIL),
        "Filter" => ("Filter", NIL, NIL),
        "SetOp" | "HashSetOp" => match prop_str("Command") {
            Some(c) if c.starts_with("Except") => ("Set", "Except", NIL),
            Some(c) if c.starts_with("Intersect") => ("Intersect", NIL, NIL),
            _ => ("Set", "SetOp", NIL),
        },
        "ModifyTable" => match prop_str("Operation") {
            Some("Insert") => ("Insert", NIL, NIL),
            Some("Update") => ("Update", NIL, NIL),
            Some("Delete") => ("Delete", NIL, NIL),
            _ => ("ModifyTable", NIL, NIL),
        },
        "Insert" | "Update" | "Delete" | "Count" | "Enum" | "Network" | "Sequence" => {
            (LEVEL1.iter().copied().find(|t| *t == base).unwrap_or(UNK), NIL, NIL)
        }
        _ => {
            warnings.push(NormalizeWarning::UnknownOperator(raw_name.to_owned()));
            return (OperatorTriple::unknown(), warnings);
        }
    };

    // Level 3 refinement, in priority order: name modifier, join type, partial, parallel.
    // Non-inner nested loops trade the Nested marker for their join type.
    if matches!(l1, "Join" | "Loop") {
        if let Some(jt) = join_type {
            l3 = jt;
        }
    }
    let partial = partial_word || prop_str("Partial Mode") == Some("Partial");
    if l3 == NIL && partial && matches!(l1, "Aggregate" | "GroupAggregate") {
        l3 = "Partial";
    }
    if l3 == NIL && (parallel_word || prop_true("Parallel Aware")) {
        l3 = "Parallel";
    }

    (OperatorTriple::new(l1, l2, l3), warnings)
}

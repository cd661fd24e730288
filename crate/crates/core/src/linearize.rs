//! DFS-bracket linearization of plan trees.
//!
//! A leaf is emitted as its own token. A node with children is emitted as
//! `BR_OPEN node child.. BR_CLOSE`, children in canonical order. The textual
//! form renders brackets as `(`/`)` and other tokens as `L1-L2-L3`:
//!
//! ```text
//! (Hash--, (Loop--Nested, Scan-Index-, Scan-Seq-) Scan-Heap-Bitmap)
//! ```

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{
    OperatorTriple, PlanNode, PlanTree, BR_CLOSE, BR_OPEN, CLS, LEVEL1, LEVEL2, LEVEL3, NIL,
    RESERVED, SEP,
};

pub const DEFAULT_MAX_SEQUENCE_LENGTH: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinearizeError {
    #[error("sequence of {len} tokens (with CLS/SEP) exceeds the cap of {cap}")]
    SequenceTooLong { len: usize, cap: usize },
    #[error("unbalanced brackets at token {0}")]
    UnbalancedBrackets(usize),
    #[error("dangling tokens starting at token {0}")]
    DanglingTokens(usize),
    #[error("malformed sequence at token {0}: {1}")]
    Malformed(usize, &'static str),
    #[error("unparseable token {0:?}")]
    BadToken(String),
}

/// An ordered list of triples, brackets and specials included.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<OperatorTriple>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Every prefix has at least as many opens as closes, and totals match.
    pub fn is_balanced(&self) -> bool {
        let mut depth = 0i64;
        for t in &self.tokens {
            if t.is_open() {
                depth += 1;
            } else if t.is_close() {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
        }
        depth == 0
    }

    /// Wraps the sequence in CLS/SEP for the encoder.
    pub fn with_specials(&self) -> TokenSequence {
        let mut tokens = Vec::with_capacity(self.len() + 2);
        tokens.push(OperatorTriple::special(CLS));
        tokens.extend(self.tokens.iter().cloned());
        tokens.push(OperatorTriple::special(SEP));
        TokenSequence { tokens }
    }

    /// Drops a leading CLS and a trailing SEP if present.
    pub fn without_specials(&self) -> TokenSequence {
        let mut s = &self.tokens[..];
        if s.first().is_some_and(|t| t.level1 == CLS) {
            s = &s[1..];
        }
        if s.last().is_some_and(|t| t.level1 == SEP) {
            s = &s[..s.len() - 1];
        }
        TokenSequence { tokens: s.to_vec() }
    }

    /// Text form: brackets as `(`/`)`, a node is followed by `, ` unless a
    /// close bracket comes next, and a close bracket is followed by a space
    /// unless another close bracket comes next.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                let prev = &self.tokens[i - 1];
                if !t.is_close() && !prev.is_open() {
                    out.push_str(if prev.is_close() { " " } else { ", " });
                }
            }
            if t.is_open() {
                out.push('(');
            } else if t.is_close() {
                out.push(')');
            } else {
                out.push_str(&t.render());
            }
        }
        out
    }

    /// Parses the text form. Commas and whitespace are both accepted as separators.
    pub fn parse(text: &str) -> Result<Self, LinearizeError> {
        let mut tokens = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, tokens: &mut Vec<OperatorTriple>| {
            if word.is_empty() {
                return Ok(());
            }
            let t = OperatorTriple::parse_rendered(word)
                .ok_or_else(|| LinearizeError::BadToken(word.clone()))?;
            tokens.push(t);
            word.clear();
            Ok(())
        };
        for ch in text.chars() {
            match ch {
                '(' | ')' => {
                    flush(&mut word, &mut tokens)?;
                    tokens.push(OperatorTriple::special(if ch == '(' { BR_OPEN } else { BR_CLOSE }));
                }
                c if c == ',' || c.is_whitespace() => flush(&mut word, &mut tokens)?,
                c => word.push(c),
            }
        }
        flush(&mut word, &mut tokens)?;
        Ok(Self { tokens })
    }
}

/// Linearizes with the default length cap.
pub fn linearize(tree: &PlanTree) -> Result<TokenSequence, LinearizeError> {
    linearize_with_cap(tree, DEFAULT_MAX_SEQUENCE_LENGTH)
}

/// Linearizes a tree. The cap applies to the sequence after CLS/SEP wrapping.
pub fn linearize_with_cap(tree: &PlanTree, cap: usize) -> Result<TokenSequence, LinearizeError> {
    fn emit(node: &PlanNode, out: &mut Vec<OperatorTriple>) {
        if node.children.is_empty() {
            out.push(node.triple.clone());
            return;
        }
        out.push(OperatorTriple::special(BR_OPEN));
        out.push(node.triple.clone());
        for c in &node.children {
            emit(c, out);
        }
        out.push(OperatorTriple::special(BR_CLOSE));
    }
    let tree = tree.normalized();
    let mut tokens = Vec::with_capacity(3 * tree.node_count);
    emit(&tree.root, &mut tokens);
    if tokens.len() + 2 > cap {
        return Err(LinearizeError::SequenceTooLong {
            len: tokens.len() + 2,
            cap,
        });
    }
    Ok(TokenSequence { tokens })
}

/// Rebuilds a tree of bare nodes from a sequence. CLS/SEP at the ends are ignored.
pub fn delinearize(seq: &TokenSequence) -> Result<PlanTree, LinearizeError> {
    let seq = seq.without_specials();
    let toks = &seq.tokens;
    if toks.is_empty() {
        return Err(LinearizeError::Malformed(0, "empty sequence"));
    }
    // Stack of (node triple, children) for open groups.
    let mut stack: Vec<(OperatorTriple, Vec<PlanNode>)> = Vec::new();
    let mut root: Option<PlanNode> = None;
    let mut i = 0;
    while i < toks.len() {
        if root.is_some() {
            return Err(LinearizeError::DanglingTokens(i));
        }
        let t = &toks[i];
        let finished = if t.is_open() {
            let head = toks.get(i + 1).ok_or(LinearizeError::UnbalancedBrackets(i))?;
            if head.is_open() || head.is_close() || head.is_special() {
                return Err(LinearizeError::Malformed(i + 1, "bracket must be followed by a node"));
            }
            stack.push((head.clone(), Vec::new()));
            i += 2;
            None
        } else if t.is_close() {
            let (triple, children) = stack.pop().ok_or(LinearizeError::UnbalancedBrackets(i))?;
            if children.is_empty() {
                return Err(LinearizeError::Malformed(i, "bracketed node without children"));
            }
            i += 1;
            Some(PlanNode::with_triple(triple, children))
        } else if t.is_special() {
            return Err(LinearizeError::Malformed(i, "special token inside the sequence"));
        } else {
            i += 1;
            Some(PlanNode::with_triple(t.clone(), Vec::new()))
        };
        if let Some(node) = finished {
            match stack.last_mut() {
                Some((_, children)) => children.push(node),
                None => root = Some(node),
            }
        }
    }
    if !stack.is_empty() {
        return Err(LinearizeError::UnbalancedBrackets(toks.len()));
    }
    let root = root.ok_or(LinearizeError::Malformed(0, "no root node"))?;
    Ok(PlanTree::new(root, None))
}

/// Token ids for one subtype level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl LevelVocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(VocabError::Reserved((*r).to_owned()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the UNK id.
    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

pub const NIL_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("reserved token {0:?} missing or out of place")]
    Reserved(String),
    #[error("vocabulary ids are not contiguous")]
    Gap,
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
}

/// Three per-level token maps sharing a reserved id block
/// (`NIL`, `UNK`, `BR_OPEN`, `BR_CLOSE`, `CLS`, `SEP` hold ids 0..6 in every level).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub levels: [LevelVocab; 3],
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    reserved: Vec<String>,
    level1: BTreeMap<String, u32>,
    level2: BTreeMap<String, u32>,
    level3: BTreeMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let level = |extra: &[&str]| {
            let tokens = RESERVED.iter().chain(extra).map(|s| (*s).to_owned()).collect();
            LevelVocab::from_tokens(tokens).expect("built-in vocabulary is valid")
        };
        Self {
            levels: [level(LEVEL1), level(LEVEL2), level(LEVEL3)],
        }
    }
}

impl Vocabulary {
    pub fn sizes(&self) -> [usize; 3] {
        [self.levels[0].len(), self.levels[1].len(), self.levels[2].len()]
    }

    pub fn to_json(&self) -> String {
        let map = |l: &LevelVocab| {
            l.tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i as u32))
                .collect()
        };
        let file = VocabFile {
            version: 1,
            reserved: RESERVED.iter().map(|s| (*s).to_owned()).collect(),
            level1: map(&self.levels[0]),
            level2: map(&self.levels[1]),
            level3: map(&self.levels[2]),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, VocabError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| VocabError::Malformed(e.to_string()))?;
        if file.reserved != RESERVED {
            return Err(VocabError::Reserved(file.reserved.join(",")));
        }
        let level = |m: BTreeMap<String, u32>| {
            let mut tokens = vec![None; m.len()];
            for (t, id) in m {
                let slot = tokens.get_mut(id as usize).ok_or(VocabError::Gap)?;
                if slot.is_some() {
                    return Err(VocabError::Duplicate(t));
                }
                *slot = Some(t);
            }
            let tokens = tokens.into_iter().collect::<Option<Vec<_>>>().ok_or(VocabError::Gap)?;
            LevelVocab::from_tokens(tokens)
        };
        Ok(Self {
            levels: [level(file.level1)?, level(file.level2)?, level(file.level3)?],
        })
    }
}

/// Parallel id lists, one per subtype level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedIds {
    pub level1: Vec<u32>,
    pub level2: Vec<u32>,
    pub level3: Vec<u32>,
}

impl EncodedIds {
    pub fn len(&self) -> usize {
        self.level1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.level1.is_empty()
    }

    pub fn levels(&self) -> [&[u32]; 3] {
        [&self.level1, &self.level2, &self.level3]
    }
}

/// Maps each token to its per-level ids; unknown tokens get UNK at their level only.
pub fn encode_ids(seq: &TokenSequence, vocab: &Vocabulary) -> EncodedIds {
    let mut out = EncodedIds {
        level1: Vec::with_capacity(seq.len()),
        level2: Vec::with_capacity(seq.len()),
        level3: Vec::with_capacity(seq.len()),
    };
    for t in &seq.tokens {
        out.level1.push(vocab.levels[0].id_or_unk(&t.level1));
        out.level2.push(vocab.levels[1].id_or_unk(&t.level2));
        out.level3.push(vocab.levels[2].id_or_unk(&t.level3));
    }
    out
}

/// NIL triple used for padding.
pub fn nil_triple() -> OperatorTriple {
    OperatorTriple::new(NIL, NIL, NIL)
}

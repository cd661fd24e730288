//! Smatch similarity between plan trees.
//!
//! A tree decomposes into triples: one instance triple `(node, level1)` per
//! node, one attribute triple `(node, level, token)` per non-NIL level-2/3
//! subtype, and one untyped edge triple `(parent, child)` per edge. Given a
//! one-to-one node mapping, a triple of `a` is matched when its image is a
//! triple of `b`. Smatch is the F1 of the best mapping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{Level, OperatorTriple, PlanNode, PlanTree, NIL};

pub const DEFAULT_RESTARTS: usize = 4;
/// Largest smaller-side node count the exhaustive search accepts.
pub const EXACT_MAX_NODES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmatchError {
    #[error("exact search needs one tree with at most {EXACT_MAX_NODES} nodes (got {0} and {1})")]
    TooLarge(usize, usize),
}

/// Triple decomposition of a tree. Node ids are root-first positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleSet {
    pub instances: Vec<(usize, String)>,
    pub attributes: Vec<(usize, Level, String)>,
    pub edges: Vec<(usize, usize)>,
}

impl TripleSet {
    pub fn len(&self) -> usize {
        self.instances.len() + self.attributes.len() + self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn extract_triples(tree: &PlanTree) -> TripleSet {
    let flat = FlatTree::new(tree);
    let mut set = TripleSet {
        instances: Vec::new(),
        attributes: Vec::new(),
        edges: Vec::new(),
    };
    for (i, t) in flat.triples.iter().enumerate() {
        set.instances.push((i, t.level1.clone()));
        for level in [Level::L2, Level::L3] {
            let tok = t.get(level);
            if tok != NIL {
                set.attributes.push((i, level, tok.to_owned()));
            }
        }
        if let Some(p) = flat.parent[i] {
            set.edges.push((p, i));
        }
    }
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmatchResult {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
    /// Image in `b` of each node of `a` (root-first ids).
    pub mapping: Vec<Option<usize>>,
    pub matched: usize,
    pub restarts_used: usize,
}

impl SmatchResult {
    fn from_counts(matched: usize, total_a: usize, total_b: usize, mapping: Vec<Option<usize>>, restarts_used: usize) -> Self {
        let precision = ratio(matched, total_a);
        let recall = ratio(matched, total_b);
        let score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            score,
            precision,
            recall,
            mapping,
            matched,
            restarts_used,
        }
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

struct FlatTree {
    triples: Vec<OperatorTriple>,
    parent: Vec<Option<usize>>,
    /// Parent and children of each node.
    neighbors: Vec<Vec<usize>>,
    total: usize,
}

impl FlatTree {
    fn new(tree: &PlanTree) -> Self {
        fn walk(n: &PlanNode, parent: Option<usize>, f: &mut FlatTree) {
            let id = f.triples.len();
            f.triples.push(n.triple.clone());
            f.parent.push(parent);
            f.neighbors.push(Vec::new());
            if let Some(p) = parent {
                f.neighbors[p].push(id);
                f.neighbors[id].push(p);
            }
            for c in &n.children {
                walk(c, Some(id), f);
            }
        }
        let mut f = FlatTree {
            triples: Vec::new(),
            parent: Vec::new(),
            neighbors: Vec::new(),
            total: 0,
        };
        walk(&tree.root, None, &mut f);
        let attrs: usize = f
            .triples
            .iter()
            .map(|t| usize::from(t.level2 != NIL) + usize::from(t.level3 != NIL))
            .sum();
        f.total = f.triples.len() + attrs + f.triples.len() - 1;
        f
    }

    fn len(&self) -> usize {
        self.triples.len()
    }
}

/// Matching problem between two flattened trees.
struct Problem<'a> {
    a: &'a FlatTree,
    b: &'a FlatTree,
    /// Matched node-local triples when a-node i maps to b-node j.
    node_score: Vec<Vec<u32>>,
}

impl<'a> Problem<'a> {
    fn new(a: &'a FlatTree, b: &'a FlatTree) -> Self {
        let node_score = a
            .triples
            .iter()
            .map(|ta| {
                b.triples
                    .iter()
                    .map(|tb| {
                        u32::from(ta.level1 == tb.level1)
                            + u32::from(ta.level2 != NIL && ta.level2 == tb.level2)
                            + u32::from(ta.level3 != NIL && ta.level3 == tb.level3)
                    })
                    .collect()
            })
            .collect();
        Self { a, b, node_score }
    }

    fn edge_matched(&self, map: &[Option<usize>], parent: usize, child: usize) -> bool {
        match (map[parent], map[child]) {
            (Some(p), Some(c)) => self.b.parent[c] == Some(p),
            _ => false,
        }
    }

    fn total_matched(&self, map: &[Option<usize>]) -> usize {
        let mut m = 0usize;
        for i in 0..self.a.len() {
            if let Some(j) = map[i] {
                m += self.node_score[i][j] as usize;
            }
            if let Some(p) = self.a.parent[i] {
                m += usize::from(self.edge_matched(map, p, i));
            }
        }
        m
    }

    /// Matched triples touching any node in `nodes` (edges counted once).
    fn local(&self, map: &[Option<usize>], nodes: &[usize]) -> i64 {
        let mut m = 0i64;
        for (k, &i) in nodes.iter().enumerate() {
            if let Some(j) = map[i] {
                m += i64::from(self.node_score[i][j]);
            }
            for &n in &self.a.neighbors[i] {
                // An edge between two listed nodes is counted from the earlier one only.
                if nodes[..k].contains(&n) {
                    continue;
                }
                let (p, c) = if self.a.parent[i] == Some(n) { (n, i) } else { (i, n) };
                m += i64::from(self.edge_matched(map, p, c));
            }
        }
        m
    }

    fn anchor_init(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.a.len()];
        let mut used = vec![false; self.b.len()];
        for i in 0..self.a.len() {
            let parent_img = self.a.parent[i].and_then(|p| map[p]);
            let mut best: Option<(u32, usize)> = None;
            for j in 0..self.b.len() {
                if used[j] {
                    continue;
                }
                let bonus = u32::from(parent_img.is_some() && self.b.parent[j] == parent_img);
                let s = self.node_score[i][j] + bonus;
                if s > 0 && best.map_or(true, |(bs, _)| s > bs) {
                    best = Some((s, j));
                }
            }
            if let Some((_, j)) = best {
                map[i] = Some(j);
                used[j] = true;
            }
        }
        map
    }

    fn random_init(&self, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
        let mut perm: Vec<usize> = (0..self.b.len()).collect();
        perm.shuffle(rng);
        (0..self.a.len()).map(|i| perm.get(i).copied()).collect()
    }

    /// Steepest-ascent local search over single-node moves and pairwise swaps.
    fn climb(&self, mut map: Vec<Option<usize>>) -> (usize, Vec<Option<usize>>) {
        let na = self.a.len();
        let nb = self.b.len();
        let mut inv = vec![None; nb];
        for (i, j) in map.iter().enumerate() {
            if let Some(j) = j {
                inv[*j] = Some(i);
            }
        }
        loop {
            let mut best_gain = 0i64;
            let mut best_move: Option<Move> = None;
            for i in 0..na {
                let before = self.local(&map, &[i]);
                let cur = map[i];
                let mut try_target = |target: Option<usize>, map: &mut Vec<Option<usize>>| {
                    map[i] = target;
                    let gain = self.local(map, &[i]) - before;
                    map[i] = cur;
                    if gain > best_gain {
                        best_gain = gain;
                        best_move = Some(Move::Reassign(i, target));
                    }
                };
                for j in 0..nb {
                    if inv[j].is_none() {
                        try_target(Some(j), &mut map);
                    }
                }
                if cur.is_some() {
                    try_target(None, &mut map);
                }
            }
            for i1 in 0..na {
                for i2 in (i1 + 1)..na {
                    if map[i1] == map[i2] {
                        continue;
                    }
                    let nodes = [i1, i2];
                    let before = self.local(&map, &nodes);
                    map.swap(i1, i2);
                    let gain = self.local(&map, &nodes) - before;
                    map.swap(i1, i2);
                    if gain > best_gain {
                        best_gain = gain;
                        best_move = Some(Move::Swap(i1, i2));
                    }
                }
            }
            match best_move {
                None => break,
                Some(Move::Reassign(i, target)) => {
                    if let Some(old) = map[i] {
                        inv[old] = None;
                    }
                    if let Some(j) = target {
                        inv[j] = Some(i);
                    }
                    map[i] = target;
                }
                Some(Move::Swap(i1, i2)) => {
                    map.swap(i1, i2);
                    for i in [i1, i2] {
                        if let Some(j) = map[i] {
                            inv[j] = Some(i);
                        }
                    }
                }
            }
        }
        (self.total_matched(&map), map)
    }
}

enum Move {
    Reassign(usize, Option<usize>),
    Swap(usize, usize),
}

/// Hill-climbing Smatch: one structural greedy start plus `restarts - 1`
/// random starts, each climbed to a local optimum; the best is returned.
pub fn smatch_hillclimb(a: &PlanTree, b: &PlanTree, restarts: usize, seed: u64) -> SmatchResult {
    let restarts = restarts.max(1);
    let fa = FlatTree::new(a);
    let fb = FlatTree::new(b);
    let problem = Problem::new(&fa, &fb);
    let ceiling = fa.total.min(fb.total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec<Option<usize>>)> = None;
    let mut used = 0;
    for r in 0..restarts {
        let init = if r == 0 {
            problem.anchor_init()
        } else {
            problem.random_init(&mut rng)
        };
        let (m, map) = problem.climb(init);
        used = r + 1;
        if best.as_ref().map_or(true, |(bm, _)| m > *bm) {
            best = Some((m, map));
        }
        if best.as_ref().is_some_and(|(bm, _)| *bm == ceiling) {
            break;
        }
    }
    let (m, map) = best.expect("at least one restart");
    SmatchResult::from_counts(m, fa.total, fb.total, map, used)
}

/// Exact maximum-F1 Smatch by branch-and-bound enumeration of injective maps.
pub fn smatch_exact(a: &PlanTree, b: &PlanTree) -> Result<SmatchResult, SmatchError> {
    let fa = FlatTree::new(a);
    let fb = FlatTree::new(b);
    if fa.len().min(fb.len()) > EXACT_MAX_NODES {
        return Err(SmatchError::TooLarge(fa.len(), fb.len()));
    }
    // Enumerate from the smaller side; the matched count is symmetric.
    let flipped = fa.len() > fb.len();
    let (small, large) = if flipped { (&fb, &fa) } else { (&fa, &fb) };
    let problem = Problem::new(small, large);
    let mut search = Exact::new(&problem);
    search.run();
    let small_map = search.best_map;
    let mapping = if flipped {
        let mut m = vec![None; fa.len()];
        for (i, j) in small_map.iter().enumerate() {
            if let Some(j) = j {
                m[*j] = Some(i);
            }
        }
        m
    } else {
        small_map
    };
    Ok(SmatchResult::from_counts(search.best, fa.total, fb.total, mapping, 1))
}

struct Exact<'p, 'a> {
    p: &'p Problem<'a>,
    /// Optimistic gain still available from nodes `i..`.
    suffix_bound: Vec<usize>,
    ceiling: usize,
    map: Vec<Option<usize>>,
    used: Vec<bool>,
    best: usize,
    best_map: Vec<Option<usize>>,
}

impl<'p, 'a> Exact<'p, 'a> {
    fn new(p: &'p Problem<'a>) -> Self {
        let n = p.a.len();
        let mut suffix_bound = vec![0usize; n + 1];
        for i in (0..n).rev() {
            let node_best = p.node_score[i].iter().copied().max().unwrap_or(0) as usize;
            suffix_bound[i] = suffix_bound[i + 1] + node_best + usize::from(p.a.parent[i].is_some());
        }
        Self {
            p,
            suffix_bound,
            ceiling: p.a.total.min(p.b.total),
            map: vec![None; n],
            used: vec![false; p.b.len()],
            best: 0,
            best_map: vec![None; n],
        }
    }

    fn run(&mut self) {
        self.best_map = self.p.anchor_init();
        self.best = self.p.total_matched(&self.best_map);
        self.descend(0, 0);
    }

    /// Gain of mapping node `i` (whose parent precedes it) to `j`.
    fn gain(&self, i: usize, j: Option<usize>) -> usize {
        let Some(j) = j else { return 0 };
        let mut g = self.p.node_score[i][j] as usize;
        if let Some(pa) = self.p.a.parent[i] {
            if self.map[pa].is_some() && self.p.b.parent[j] == self.map[pa] {
                g += 1;
            }
        }
        g
    }

    fn descend(&mut self, i: usize, current: usize) {
        if self.best == self.ceiling {
            return;
        }
        if i == self.map.len() {
            if current > self.best {
                self.best = current;
                self.best_map = self.map.clone();
            }
            return;
        }
        if current + self.suffix_bound[i] <= self.best {
            return;
        }
        let mut candidates: Vec<(usize, Option<usize>)> = (0..self.p.b.len())
            .filter(|&j| !self.used[j])
            .map(|j| (self.gain(i, Some(j)), Some(j)))
            .collect();
        // Leaving a node unmapped never beats a free target, but is needed
        // when the larger side is exhausted.
        if candidates.is_empty() {
            candidates.push((0, None));
        }
        candidates.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
        for (g, j) in candidates {
            self.map[i] = j;
            if let Some(j) = j {
                self.used[j] = true;
            }
            self.descend(i + 1, current + g);
            if let Some(j) = j {
                self.used[j] = false;
            }
            self.map[i] = None;
            if self.best == self.ceiling {
                return;
            }
        }
    }
}

/// Scores many pairs in parallel. Pair `k` uses seed `seed ^ k`.
pub fn smatch_many(
    pairs: &[(&PlanTree, &PlanTree)],
    restarts: usize,
    seed: u64,
) -> Vec<SmatchResult> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(k, (a, b))| smatch_hillclimb(a, b, restarts, seed ^ k as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::PlanNode;

    fn node(l1: &str, l2: &str, l3: &str, children: Vec<PlanNode>) -> PlanNode {
        PlanNode::with_triple(OperatorTriple::new(l1, l2, l3), children)
    }

    fn chain(names: &[(&str, &str)]) -> PlanTree {
        let mut it = names.iter().rev();
        let (l1, l2) = it.next().unwrap();
        let mut n = node(l1, l2, NIL, vec![]);
        for (l1, l2) in it {
            n = node(l1, l2, NIL, vec![n]);
        }
        PlanTree::new(n, None)
    }

    #[test]
    fn triple_counts() {
        let leaf = PlanTree::new(node("Scan", "Seq", NIL, vec![]), None);
        let t = extract_triples(&leaf);
        assert_eq!((t.instances.len(), t.attributes.len(), t.edges.len()), (1, 1, 0));

        let join = PlanTree::new(
            node("Join", "Hash", NIL, vec![node("Hash", NIL, NIL, vec![]), node("Sort", NIL, NIL, vec![])]),
            None,
        );
        let t = extract_triples(&join);
        assert_eq!((t.instances.len(), t.attributes.len(), t.edges.len()), (3, 1, 2));
    }

    #[test]
    fn identity_scores_one() {
        let t = chain(&[("Sort", NIL), ("Join", "Hash"), ("Scan", "Seq")]);
        let r = smatch_hillclimb(&t, &t, 4, 0);
        assert_eq!(r.score, 1.0);
        assert_eq!(smatch_exact(&t, &t).unwrap().score, 1.0);
    }

    #[test]
    fn disjoint_scores_zero() {
        let a = PlanTree::new(node("Sort", NIL, NIL, vec![]), None);
        let b = PlanTree::new(node("Limit", NIL, NIL, vec![]), None);
        assert_eq!(smatch_hillclimb(&a, &b, 4, 0).score, 0.0);
        assert_eq!(smatch_exact(&a, &b).unwrap().score, 0.0);
    }

    /// Independent brute force over every injective partial map.
    fn brute_force(a: &PlanTree, b: &PlanTree) -> usize {
        let fa = FlatTree::new(a);
        let fb = FlatTree::new(b);
        let p = Problem::new(&fa, &fb);
        fn rec(p: &Problem, i: usize, map: &mut Vec<Option<usize>>, used: &mut Vec<bool>, best: &mut usize) {
            if i == map.len() {
                *best = (*best).max(p.total_matched(map));
                return;
            }
            map[i] = None;
            rec(p, i + 1, map, used, best);
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    map[i] = Some(j);
                    rec(p, i + 1, map, used, best);
                    map[i] = None;
                    used[j] = false;
                }
            }
        }
        let mut best = 0;
        rec(&p, 0, &mut vec![None; fa.len()], &mut vec![false; fb.len()], &mut best);
        best
    }

    #[test]
    fn two_chain_vs_three_chain() {
        // a: Scan <- Sort (Sort is the parent), b: Scan <- Sort <- Aggregate.
        let a = chain(&[("Sort", NIL), ("Scan", "Seq")]);
        let b = chain(&[("Aggregate", NIL), ("Sort", NIL), ("Scan", "Seq")]);
        // |T_a| = 2 instances + 1 attribute + 1 edge = 4; |T_b| = 3 + 1 + 2 = 6.
        assert_eq!(brute_force(&a, &b), 4);
        let exact = smatch_exact(&a, &b).unwrap();
        assert_eq!(exact.matched, 4);
        assert_eq!(exact.precision, 1.0);
        assert!((exact.recall - 4.0 / 6.0).abs() < 1e-12);
        assert!((exact.score - 0.8).abs() < 1e-12);
        let hc = smatch_hillclimb(&a, &b, 8, 1);
        assert_eq!(hc.matched, 4);
    }

    #[test]
    fn exact_matches_brute_force_and_is_symmetric() {
        let a = PlanTree::new(
            node("Join", "Hash", NIL, vec![
                node("Scan", "Seq", NIL, vec![]),
                node("Hash", NIL, NIL, vec![node("Scan", "Index", "Bitmap", vec![])]),
            ]),
            None,
        );
        let b = PlanTree::new(
            node("Loop", NIL, "Nested", vec![
                node("Scan", "Index", NIL, vec![]),
                node("Join", "Hash", NIL, vec![node("Scan", "Seq", NIL, vec![]), node("Hash", NIL, NIL, vec![])]),
            ]),
            None,
        );
        let bf = brute_force(&a, &b);
        let ab = smatch_exact(&a, &b).unwrap();
        let ba = smatch_exact(&b, &a).unwrap();
        assert_eq!(ab.matched, bf);
        assert_eq!(ba.matched, bf);
        assert_eq!(ab.score, ba.score);
        assert!(smatch_hillclimb(&a, &b, 8, 3).matched <= bf);
    }

    #[test]
    fn exact_guard() {
        let mut n = node("Scan", "Seq", NIL, vec![]);
        for _ in 0..9 {
            n = node("Sort", NIL, NIL, vec![n]);
        }
        let big = PlanTree::new(n, None);
        assert_eq!(smatch_exact(&big, &big), Err(SmatchError::TooLarge(10, 10)));
    }

    #[test]
    fn deterministic() {
        let a = chain(&[("Sort", NIL), ("Join", "Hash"), ("Scan", "Seq"), ("Hash", NIL)]);
        let b = chain(&[("Join", "Hash"), ("Sort", NIL), ("Scan", "Index"), ("Hash", NIL), ("Scan", "Seq")]);
        assert_eq!(smatch_hillclimb(&a, &b, 4, 9), smatch_hillclimb(&a, &b, 4, 9));
    }
}

//! Smatch-scored plan pairs and dataset splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::MAX_PLAN_NODES;
use super::DatagenError;
use crate::plan::PlanTree;
use crate::smatch::smatch_many;

/// Fraction of pairs that pair a plan with itself.
pub const IDENTITY_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Disjoint index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffles `0..n` and cuts it as `train:dev:test = ratios`. Dev and test
    /// sizes are rounded down; train takes the remainder.
    pub fn by_ratio(n: usize, ratios: [usize; 3], seed: u64) -> Self {
        let total: usize = ratios.iter().sum::<usize>().max(1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_dev = n * ratios[1] / total;
        let n_test = n * ratios[2] / total;
        let test = idx.split_off(n - n_test);
        let dev = idx.split_off(n - n_test - n_dev);
        Self { train: idx, dev, test }
    }

    pub fn of(&self, i: usize) -> Option<Split> {
        if self.train.contains(&i) {
            Some(Split::Train)
        } else if self.dev.contains(&i) {
            Some(Split::Dev)
        } else if self.test.contains(&i) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

/// Distribution of pair scores: moments and a 10-bin histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: [usize; 10],
}

impl ScoreSummary {
    pub fn of(scores: &[f64]) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut histogram = [0; 10];
        for s in scores {
            histogram[((s * 10.0) as usize).min(9)] += 1;
        }
        Self {
            count: scores.len(),
            mean,
            std: var.sqrt(),
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDataset {
    pub pairs: Vec<ScoredPair>,
    pub splits: Splits,
    pub summary: ScoreSummary,
    /// Plans excluded for exceeding the node cap.
    pub pruned: usize,
}

/// Samples `n_pairs` plan pairs (about 1% of them identity pairs), scores them
/// with hill-climbing Smatch and splits them 20:1:1. Plans above the node cap
/// are never paired. Pair indices refer to positions in `plans`.
pub fn build_pair_dataset(
    plans: &[PlanTree],
    n_pairs: usize,
    seed: u64,
    restarts: usize,
) -> Result<PairDataset, DatagenError> {
    let eligible: Vec<usize> = (0..plans.len())
        .filter(|&i| plans[i].node_count <= MAX_PLAN_NODES)
        .collect();
    if eligible.len() < 2 {
        return Err(DatagenError::InsufficientPlans {
            eligible: eligible.len(),
            needed: 2,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_identity = ((n_pairs as f64 * IDENTITY_FRACTION).round() as usize).min(n_pairs);
    let mut index_pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let a = eligible[rng.gen_range(0..eligible.len())];
        let b = if k < n_identity {
            a
        } else {
            loop {
                let b = eligible[rng.gen_range(0..eligible.len())];
                if b != a {
                    break b;
                }
            }
        };
        index_pairs.push((a, b));
    }
    index_pairs.shuffle(&mut rng);
    let refs: Vec<(&PlanTree, &PlanTree)> = index_pairs.iter().map(|&(a, b)| (&plans[a], &plans[b])).collect();
    let results = smatch_many(&refs, restarts, seed);
    let pairs: Vec<ScoredPair> = index_pairs
        .into_iter()
        .zip(results)
        .map(|((a, b), r)| ScoredPair { a, b, score: r.score })
        .collect();
    let scores: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    Ok(PairDataset {
        summary: ScoreSummary::of(&scores),
        splits: Splits::by_ratio(pairs.len(), [20, 1, 1], seed.wrapping_add(1)),
        pruned: plans.len() - eligible.len(),
        pairs,
    })
}

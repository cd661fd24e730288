//! Error metrics, feature normalization and early stopping.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    if xs.is_empty() {
        0.0
    } else {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
    }
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mae length mismatch");
    mean(&pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect::<Vec<_>>())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mse length mismatch");
    mean(&pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).collect::<Vec<_>>())
}

/// Percentile `q ∈ [0, 100]` with linear interpolation between order statistics.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// `sign(x) · ln(1 + |x|)`.
pub fn signed_log1p(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Per-column affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns with (near) zero spread get unit scale.
    pub fn fit(rows: &[Vec<f64>], width: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; width];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; width];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((z, m), s)| z * s + m).collect()
    }
}

/// Stops when the monitored error has not improved by more than `min_delta`
/// for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's error; returns true when it is a new best.
    ///
    /// A new best resets the patience counter only if it beats the previous
    /// best by more than `min_delta`.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        let significant = value < self.best - self.min_delta;
        let improved = value < self.best;
        if improved {
            self.best = value;
            self.best_epoch = epoch;
        }
        if significant {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

/// One line of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub mse: f64,
    pub mae: f64,
}

pub fn curve_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,mse,mae\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.mse, r.mae));
    }
    out
}

/// Deterministic subset of `ceil(fraction · len)` items, at least one.
pub fn take_fraction<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Vec<T> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let k = ((fraction * items.len() as f64).ceil() as usize).clamp(1.min(items.len()), items.len());
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| items[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_interpolate() {
        let xs = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 50.0), 3.0);
        assert_eq!(percentile(&xs, 100.0), 5.0);
        assert!((percentile(&xs, 5.0) - 1.2).abs() < 1e-12);
        assert!((percentile(&xs, 95.0) - 4.8).abs() < 1e-12);
    }

    #[test]
    fn standardizer_round_trip() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(&rows, 2);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[3.0, 5.0]), vec![1.0, 0.0]);
        assert_eq!(s.invert(&[1.0, 0.0]), vec![3.0, 5.0]);
    }

    #[test]
    fn early_stopping_needs_significant_gains() {
        let mut es = EarlyStopping::new(2, 5.0);
        assert!(es.update(0, 100.0));
        assert!(es.update(1, 98.0));
        assert!(!es.should_stop());
        es.update(2, 97.0);
        assert!(es.should_stop());
        assert_eq!(es.best, 97.0);
        assert_eq!(es.best_epoch, 2);
        let mut es = EarlyStopping::new(2, 5.0);
        es.update(0, 100.0);
        es.update(1, 90.0);
        es.update(2, 89.0);
        assert!(!es.should_stop());
    }

    #[test]
    fn fractions_are_deterministic_subsets() {
        let items: Vec<usize> = (0..10).collect();
        let a = take_fraction(&items, 0.3, 1);
        assert_eq!(a.len(), 3);
        assert_eq!(a, take_fraction(&items, 0.3, 1));
        assert_eq!(take_fraction(&items, 1.0, 4), items);
        assert_eq!(take_fraction(&items, 0.01, 4).len(), 1);
    }
}

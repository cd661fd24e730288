//! Latin Hypercube sampling of database configurations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::catalog::{setting_unit, DbConfig, Unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

/// Sampling range of one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRange {
    pub name: String,
    pub unit: Unit,
    pub low: f64,
    pub high: f64,
    pub scale: Scale,
}

impl ConfigRange {
    pub fn new(name: &str, unit: Unit, low: f64, high: f64, scale: Scale) -> Self {
        Self {
            name: name.to_owned(),
            unit,
            low,
            high,
            scale,
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |why: &str| {
            Err(DatagenError::InvalidRange {
                name: self.name.clone(),
                reason: why.to_owned(),
            })
        };
        if !(self.low.is_finite() && self.high.is_finite()) {
            return bad("bounds must be finite");
        }
        if self.low >= self.high {
            return bad("low must be below high");
        }
        if self.scale == Scale::Log && self.low <= 0.0 {
            return bad("log scale needs a positive lower bound");
        }
        if let Some(unit) = setting_unit(&self.name) {
            if unit != self.unit {
                return bad(&format!("unit {:?} does not match the setting's unit {unit:?}", self.unit));
            }
        }
        Ok(())
    }

    fn to_unit(&self, x: f64) -> f64 {
        match self.scale {
            Scale::Linear => (x - self.low) / (self.high - self.low),
            Scale::Log => (x.ln() - self.low.ln()) / (self.high.ln() - self.low.ln()),
        }
    }

    fn from_unit(&self, u: f64) -> f64 {
        match self.scale {
            Scale::Linear => self.low + u * (self.high - self.low),
            Scale::Log => (self.low.ln() + u * (self.high.ln() - self.low.ln())).exp(),
        }
    }

    /// Index of the stratum of `value` when the range is cut into `n`
    /// equal-probability strata.
    pub fn stratum_of(&self, value: f64, n: usize) -> usize {
        let u = self.to_unit(value);
        ((u * n as f64).floor().max(0.0) as usize).min(n - 1)
    }
}

/// Default sampling ranges: the 5th and 95th percentiles of the settings
/// observed in the reference workload. Settings absent here keep their defaults.
pub fn default_ranges() -> Vec<ConfigRange> {
    use Scale::{Linear, Log};
    use Unit::{Bytes, Integer, Ms, Number};
    vec![
        ConfigRange::new("bgwriter_delay", Ms, 456.0, 9_421.05, Log),
        ConfigRange::new("bgwriter_lru_maxpages", Integer, 55.0, 958.05, Log),
        ConfigRange::new("checkpoint_timeout", Ms, 60.0, 540.0, Linear),
        ConfigRange::new("deadlock_timeout", Ms, 26_000.0, 540_000.0, Log),
        ConfigRange::new("default_statistics_target", Integer, 454.85, 9_563.0, Log),
        ConfigRange::new("effective_cache_size", Bytes, 131_072.0, 1_966_080.0, Log),
        ConfigRange::new("effective_io_concurrency", Integer, 6.0, 96.0, Log),
        ConfigRange::new("maintenance_work_mem", Bytes, 876_953.6, 15_728_640.0, Log),
        ConfigRange::new("max_stack_depth", Integer, 417.95, 5_120.0, Log),
        ConfigRange::new("random_page_cost", Number, 560.4, 9_507.39, Log),
        ConfigRange::new("shared_buffers", Bytes, 131_072.0, 3_932_160.0, Log),
        ConfigRange::new("wal_buffers", Bytes, 12_416.0, 131_072.0, Log),
        ConfigRange::new("work_mem", Bytes, 1_048_576.0, 31_457_280.0, Log),
    ]
}

/// Draws `n` configurations. Each dimension is cut into `n` equal-probability
/// strata (in log space for log-scaled ranges); sample `i` takes the midpoint
/// of stratum `perm_d[i]`, with an independent permutation per dimension.
pub fn lhs_configs(n: usize, ranges: &[ConfigRange], seed: u64) -> Result<Vec<DbConfig>, DatagenError> {
    if n == 0 {
        return Err(DatagenError::InvalidCount("lhs needs at least one sample".into()));
    }
    for r in ranges {
        r.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut configs = vec![DbConfig::defaults(); n];
    for range in ranges {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for (config, stratum) in configs.iter_mut().zip(perm) {
            let u = (stratum as f64 + 0.5) / n as f64;
            config.set(&range.name, range.from_unit(u));
        }
    }
    Ok(configs)
}

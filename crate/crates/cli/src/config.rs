//! TOML configuration files.
//!
//! ```toml
//! version = 1
//! seed = 7
//! jobs = 2
//!
//! [pretrain-structure]
//! d_model = 64
//! epochs = 50
//!
//! [predict-latency.train]
//! hidden = [256, 256]
//! ```
//!
//! Each command reads the table named after it; keys are the command's flag
//! names with underscores. Flags given on the command line win. Relative
//! paths are resolved against the working directory.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub const CONFIG_VERSION: i64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    table: toml::Table,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e| CliError::usage(format!("config file: {e}")))?;
        match table.get("version") {
            Some(toml::Value::Integer(CONFIG_VERSION)) => {}
            Some(v) => return Err(CliError::usage(format!("config file: unsupported version {v}"))),
            None => return Err(CliError::usage("config file: missing version")),
        }
        let uint = |key: &str| -> Result<Option<u64>, CliError> {
            match table.get(key) {
                None => Ok(None),
                Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
                Some(v) => Err(CliError::usage(format!("config file: {key} must be a non-negative integer, got {v}"))),
            }
        };
        let seed = uint("seed")?;
        let jobs = uint("jobs")?.map(|j| j as usize);
        for (k, v) in &table {
            if !matches!(k.as_str(), "version" | "seed" | "jobs") && !v.is_table() {
                return Err(CliError::usage(format!("config file: unknown top-level key {k:?}")));
            }
        }
        Ok(Self { seed, jobs, table })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The table for a command; nested commands use dotted names.
    pub fn section(&self, name: &str) -> Option<&toml::Table> {
        let mut parts = name.split('.');
        let mut cur = self.table.get(parts.next()?)?.as_table()?;
        for p in parts {
            cur = cur.get(p)?.as_table()?;
        }
        Some(cur)
    }
}

/// Fills every argument left unset on the command line from `section`.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, section: Option<&toml::Table>) -> Result<T, CliError> {
    let mut value = serde_json::to_value(flags).expect("arguments serialize");
    if let (Some(section), Value::Object(obj)) = (section, &mut value) {
        for (k, v) in section {
            // Nested tables belong to subcommands.
            if v.is_table() {
                continue;
            }
            let slot = obj.entry(k.clone()).or_insert(Value::Null);
            if slot.is_null() {
                *slot = serde_json::to_value(v).map_err(|e| CliError::usage(format!("config key {k}: {e}")))?;
            }
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::usage(format!("config file: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Args {
        epochs: Option<usize>,
        lr: Option<f64>,
        hidden: Option<Vec<usize>>,
    }

    const FILE: &str = "version = 1\nseed = 9\n[train]\nepochs = 5\nlr = 0.01\nhidden = [4, 2]\n[a.b]\nepochs = 3\n";

    #[test]
    fn flags_override_file_values() {
        let cfg = ConfigFile::parse(FILE).unwrap();
        assert_eq!(cfg.seed, Some(9));
        let flags = Args {
            epochs: Some(7),
            ..Args::default()
        };
        let merged = merge(&flags, cfg.section("train")).unwrap();
        assert_eq!(merged, Args { epochs: Some(7), lr: Some(0.01), hidden: Some(vec![4, 2]) });
        assert_eq!(merge(&Args::default(), cfg.section("a.b")).unwrap().epochs, Some(3));
        assert_eq!(merge(&Args::default(), None).unwrap(), Args::default());
    }

    #[test]
    fn bad_files_are_usage_errors() {
        for text in ["seed = 1", "version = 2", "version = 1\nfoo = 3", "version = 1\nseed = -1", "not toml ="] {
            assert_eq!(ConfigFile::parse(text).unwrap_err().exit_code(), 1, "{text}");
        }
        let cfg = ConfigFile::parse("version = 1\n[train]\nepoch = 5\n").unwrap();
        assert!(matches!(merge(&Args::default(), cfg.section("train")), Err(CliError::Usage(_))));
    }
}

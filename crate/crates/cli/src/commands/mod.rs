//! One module per command family. Every command implements [`Step`].

pub mod data;
pub mod report;
pub mod tasks;
pub mod train;

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::context::Ctx;
use crate::error::CliError;

/// A command with resolvable arguments.
///
/// Arguments are all optional so that flags and config-file values can be
/// merged; `run` checks the required ones.
pub trait Step: Serialize + DeserializeOwned + Clone + Sync {
    /// Command name; also the config-file table and the manifest `command`.
    const NAME: &'static str;
    /// Whether the first output is a directory (its manifest goes inside it).
    const OUTPUT_IS_DIR: bool = false;

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>>;
    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>>;
    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError>;

    /// Where the manifest goes when no `--manifest` is given.
    fn default_manifest(&mut self) -> Option<PathBuf> {
        let first = self.outputs().into_iter().find_map(|p| p.clone())?;
        if Self::OUTPUT_IS_DIR {
            Some(first.join("manifest.json"))
        } else {
            let mut name = first.file_name()?.to_os_string();
            name.push(".manifest.json");
            Some(first.with_file_name(name))
        }
    }
}

pub(crate) fn req<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::usage(format!("missing --{flag}")))
}

pub(crate) fn req_path<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    req(v, flag).map(PathBuf::as_path)
}

pub(crate) fn positive(v: usize, flag: &str) -> Result<usize, CliError> {
    if v == 0 {
        return Err(CliError::usage(format!("--{flag} must be positive")));
    }
    Ok(v)
}

pub(crate) fn check_fractions(fractions: &[f64]) -> Result<(), CliError> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(CliError::usage("fractions must lie in (0, 1]"));
    }
    Ok(())
}

/// `Some(v)` for a positive clip norm, `None` for zero, `default` when unset.
pub(crate) fn clip(flag: Option<f64>, default: Option<f64>) -> Option<f64> {
    match flag {
        Some(v) if v > 0.0 => Some(v),
        Some(_) => None,
        None => default,
    }
}

pub(crate) fn to_json_line(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("row serializes")
}

pub(crate) fn to_json_pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArg {
    Both,
    StructureOnly,
    PerformanceOnly,
}

impl From<AblationArg> for qplan_models::downstream::Ablation {
    fn from(a: AblationArg) -> Self {
        use qplan_models::downstream::Ablation;
        match a {
            AblationArg::Both => Ablation::Both,
            AblationArg::StructureOnly => Ablation::StructureOnly,
            AblationArg::PerformanceOnly => Ablation::PerformanceOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderModeArg {
    FixedFeatures,
    Finetune,
}

impl From<EncoderModeArg> for qplan_models::downstream::EncoderMode {
    fn from(m: EncoderModeArg) -> Self {
        use qplan_models::downstream::EncoderMode;
        match m {
            EncoderModeArg::FixedFeatures => EncoderMode::FixedFeatures,
            EncoderModeArg::Finetune => EncoderMode::Finetune,
        }
    }
}

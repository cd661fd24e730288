//! Structured run reports and their CSV tables.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use qplan_models::downstream::{accuracy_csv, summary_csv, template_csv, ClassifierReport, LatencyReport, LatencySummary};
use qplan_models::metrics::curve_csv;
use qplan_models::perf::{comparison_csv, finetune_csv, ComparisonRow, PerfFinetuneRow, PerfReport, LABEL_NAMES};
use qplan_models::structure::{fraction_rows_csv, FractionRow, PpsrReport};
use serde::{Deserialize, Serialize};

use super::{req_path, Step};
use crate::context::Ctx;
use crate::error::CliError;

/// What a training command writes to `--report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Report {
    Ppsr {
        report: PpsrReport,
        test_mae: Option<f64>,
    },
    Perf {
        reports: Vec<PerfReport>,
        #[serde(default)]
        comparison: Vec<ComparisonRow>,
    },
    StructureFinetune {
        rows: Vec<FractionRow>,
    },
    PerfFinetune {
        rows: Vec<PerfFinetuneRow>,
    },
    Latency {
        report: LatencyReport,
        #[serde(default)]
        summaries: Vec<LatencySummary>,
    },
    Classifier {
        rows: Vec<ClassifierReport>,
    },
}

impl Report {
    /// Table names, the default first.
    pub fn tables(&self) -> &'static [&'static str] {
        match self {
            Report::Ppsr { .. } => &["curve"],
            Report::Perf { .. } => &["training", "curves", "comparison"],
            Report::StructureFinetune { .. } | Report::PerfFinetune { .. } => &["fractions"],
            Report::Latency { .. } => &["templates", "summary", "curve"],
            Report::Classifier { .. } => &["accuracy"],
        }
    }

    pub fn table(&self, name: Option<&str>) -> Result<String, CliError> {
        let name = name.unwrap_or(self.tables()[0]);
        let csv = match (self, name) {
            (Report::Ppsr { report, .. }, "curve") => curve_csv(&report.history),
            (Report::Perf { reports, .. }, "training") => perf_training_csv(reports),
            (Report::Perf { reports, .. }, "curves") => perf_curves_csv(reports),
            (Report::Perf { comparison, .. }, "comparison") => comparison_csv(comparison),
            (Report::StructureFinetune { rows }, "fractions") => fraction_rows_csv(rows),
            (Report::PerfFinetune { rows }, "fractions") => finetune_csv(rows),
            (Report::Latency { report, .. }, "templates") => template_csv(&report.templates),
            (Report::Latency { report, summaries }, "summary") => {
                let mut all = vec![LatencySummary::from(report)];
                all.extend(summaries.iter().cloned());
                summary_csv(&all)
            }
            (Report::Latency { report, .. }, "curve") => {
                let mut out = String::from("epoch,train_mse_log1p\n");
                for (e, v) in report.train_curve.iter().enumerate() {
                    let _ = writeln!(out, "{},{v}", e + 1);
                }
                out
            }
            (Report::Classifier { rows }, "accuracy") => accuracy_csv(rows),
            _ => {
                return Err(CliError::usage(format!(
                    "no table {name:?} in this report; available: {}",
                    self.tables().join(", ")
                )))
            }
        };
        Ok(csv)
    }
}

fn perf_training_csv(reports: &[PerfReport]) -> String {
    let mut out = String::from("group,arch,params,n_train,n_val,n_test,epochs,best_epoch");
    for prefix in ["mae", "std"] {
        for l in LABEL_NAMES {
            let _ = write!(out, ",{prefix}_{l}");
        }
    }
    out.push('\n');
    for r in reports {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.group.name(),
            r.arch,
            r.param_count,
            r.n_train,
            r.n_val,
            r.n_test,
            r.epochs_run,
            r.best_epoch
        );
        for v in r.test_mae.iter().chain(&r.test_label_std) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn perf_curves_csv(reports: &[PerfReport]) -> String {
    let mut out = String::from("group,epoch,val_mae_total_time,best_so_far\n");
    for r in reports {
        for (e, (v, b)) in r.val_curve.iter().zip(&r.best_so_far).enumerate() {
            let _ = writeln!(out, "{},{},{v},{b}", r.group.name(), e + 1);
        }
    }
    out
}

/// Render a CSV table from a run report.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportArgs {
    /// Report JSON written by a training command.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Table to render; the report kind's first table when absent.
    #[arg(long)]
    pub table: Option<String>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Step for ReportArgs {
    const NAME: &'static str = "report";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.input]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let path = req_path(&self.input, "input")?;
        let report: Report = serde_json::from_str(&ctx.read_text(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let csv = report.table(self.table.as_deref())?;
        match &self.out {
            Some(out) => ctx.write(out, csv),
            None => {
                ctx.println(csv.trim_end());
                Ok(())
            }
        }
    }
}

//! Encoder pretraining and finetuning.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use qplan_core::catalog::Catalog;
use qplan_core::linearize::Vocabulary;
use qplan_core::plan::{FeatureSchema, PlanTree};
use qplan_models::perf::{
    build_training_rows, compare_architectures, finetune_perf, finetune_table, matched_single_column, train_all,
    Architecture, FeatureBundle, PerfEncoderConfig, PerfEncoderSet, PerfTrainOptions, TOTAL_TIME,
};
use qplan_models::structure::{
    evaluate_pairs, finetune_structure, fraction_sweep, train_ppsr, FinetuneMode, StructureEncoderConfig,
    StructureModel, TrainOptions,
};
use qplan_models::metrics::curve_csv;
use serde::{Deserialize, Serialize};

use super::data::write_json;
use super::report::Report;
use super::{check_fractions, clip, positive, req, req_path, to_json_line, Step};
use crate::context::Ctx;
use crate::error::CliError;
use crate::inputs::{
    id_index, load_catalog, load_corpus, load_pairs, load_perf_set, load_plans, load_schema, load_structure, perf_file,
    PairSplits,
};

/// Structure-encoder options; each flag overrides the matching config field.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_sequence_length: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Three subtype-embedding widths summing to d_model; half, quarter, quarter when absent.
    #[arg(long, value_delimiter = ',')]
    pub level_dims: Option<Vec<usize>>,
}

fn structure_config(f: &StructureFlags) -> Result<StructureEncoderConfig, CliError> {
    let base = StructureEncoderConfig::default();
    let d = f.d_model.unwrap_or(base.d_model);
    let level_dims = match &f.level_dims {
        Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
        Some(_) => return Err(CliError::usage("--level-dims takes three widths")),
        None if f.d_model.is_some() => [d / 2, d / 4, d - d / 2 - d / 4],
        None => base.level_dims,
    };
    let config = StructureEncoderConfig {
        d_model: d,
        heads: f.heads.unwrap_or(base.heads),
        layers: f.layers.unwrap_or(base.layers),
        d_ff: f.d_ff.unwrap_or(base.d_ff),
        max_sequence_length: f.max_sequence_length.unwrap_or(base.max_sequence_length),
        dropout: f.dropout.unwrap_or(base.dropout),
        level_dims,
    };
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(config)
}

/// Options of the pair-regression training loop.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct PpsrFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs without a dev-MAE gain above min_delta before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    /// Gradient-norm clip; 0 disables.
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

fn ppsr_options(f: &PpsrFlags, seed: u64) -> Result<TrainOptions, CliError> {
    let base = TrainOptions::default();
    Ok(TrainOptions {
        epochs: positive(f.epochs.unwrap_or(base.epochs), "epochs")?,
        batch_size: positive(f.batch_size.unwrap_or(base.batch_size), "batch-size")?,
        lr: f.lr.unwrap_or(base.lr),
        patience: f.patience.unwrap_or(base.patience),
        min_delta: f.min_delta.unwrap_or(base.min_delta),
        seed,
        clip_norm: clip(f.clip_norm, base.clip_norm),
    })
}

/// Plans of a corpus with their pair splits.
fn plans_and_pairs(ctx: &mut Ctx, corpus: &Path, pairs: &Path) -> Result<(Vec<PlanTree>, PairSplits), CliError> {
    let plans = load_plans(ctx, corpus)?;
    let splits = {
        let index = id_index(plans.iter().map(|(id, _)| id.as_str()))?;
        load_pairs(ctx, pairs, &index, ctx.seed)?
    };
    Ok((plans.into_iter().map(|(_, t)| t).collect(), splits))
}

/// Pretrain the structure encoder by plan-pair similarity regression.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainStructureArgs {
    /// Plans the pair ids refer to.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSONL rows {plan_a, plan_b, smatch, split}.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Vocabulary JSON; the built-in vocabulary when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: StructureFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: PpsrFlags,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch CSV (epoch, split, mse, mae).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl Step for PretrainStructureArgs {
    const NAME: &'static str = "pretrain-structure";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.corpus, &mut self.pairs, &mut self.vocab]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out, &mut self.metrics, &mut self.report]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let out = req_path(&self.out, "out")?;
        let config = structure_config(&self.model)?;
        let opts = ppsr_options(&self.train, ctx.seed)?;
        let vocab = match &self.vocab {
            Some(p) => Vocabulary::from_json(&ctx.read_text(p)?)?,
            None => Vocabulary::default(),
        };
        let (plans, pairs) = plans_and_pairs(ctx, req_path(&self.corpus, "corpus")?, req_path(&self.pairs, "pairs")?)?;
        let mut model = StructureModel::new(config, vocab, ctx.seed)?;
        let report = train_ppsr(&mut model, &plans, &pairs.train, &pairs.dev, &opts)?;
        let test_mae = if pairs.test.is_empty() {
            None
        } else {
            Some(evaluate_pairs(&model, &plans, &pairs.test)?.1)
        };
        ctx.write_checkpoint(out, &model.to_bytes())?;
        if let Some(p) = &self.metrics {
            ctx.write(p, curve_csv(&report.history))?;
        }
        ctx.note("best_dev_mae", report.best_dev_mae);
        ctx.note("baseline_dev_mae", report.baseline_dev_mae);
        ctx.note("epochs_run", report.epochs_run);
        ctx.note("test_mae", test_mae);
        ctx.println(format!(
            "dev MAE {:.4} (mean predictor {:.4}) after {} epochs, best epoch {}",
            report.best_dev_mae,
            report.baseline_dev_mae,
            report.epochs_run,
            report.best_epoch + 1
        ));
        if let Some(p) = &self.report {
            write_json(ctx, p, &Report::Ppsr { report, test_mae })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ArchArg {
    MultiColumn,
    SingleColumn,
}

/// Performance-encoder options; each flag overrides the matching config field.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct PerfFlags {
    #[arg(long, value_delimiter = ',')]
    pub node_hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub meta_hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub db_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub merge_dim: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    /// Hidden width of the single-column variant; matched to the multi-column parameter count when absent.
    #[arg(long)]
    pub single_hidden: Option<usize>,
}

fn perf_config(f: &PerfFlags, schema: &FeatureSchema) -> Result<(PerfEncoderConfig, Architecture), CliError> {
    let base = PerfEncoderConfig::default();
    let config = PerfEncoderConfig {
        node_width: schema.width,
        node_hidden: f.node_hidden.clone().unwrap_or(base.node_hidden),
        meta_hidden: f.meta_hidden.clone().unwrap_or(base.meta_hidden),
        db_hidden: f.db_hidden.clone().unwrap_or(base.db_hidden),
        merge_dim: f.merge_dim.unwrap_or(base.merge_dim),
        embedding_dim: f.embedding_dim.unwrap_or(base.embedding_dim),
        ..base
    };
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let arch = match (f.arch.unwrap_or(ArchArg::MultiColumn), f.single_hidden) {
        (ArchArg::MultiColumn, _) => Architecture::MultiColumn,
        (ArchArg::SingleColumn, Some(h)) => Architecture::SingleColumn { hidden: positive(h, "single-hidden")? },
        (ArchArg::SingleColumn, None) => matched_single_column(&config),
    };
    Ok((config, arch))
}

/// Options of the performance-encoder training loop.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct PerfTrainFlags {
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without a validation gain above min_delta before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// In label units (milliseconds for total time).
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Gradient-norm clip; 0 disables.
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

fn perf_options(f: &PerfTrainFlags, seed: u64) -> Result<PerfTrainOptions, CliError> {
    let base = PerfTrainOptions::default();
    Ok(PerfTrainOptions {
        max_epochs: positive(f.max_epochs.unwrap_or(base.max_epochs), "max-epochs")?,
        patience: f.patience.unwrap_or(base.patience),
        min_delta: f.min_delta.unwrap_or(base.min_delta),
        batch_size: positive(f.batch_size.unwrap_or(base.batch_size), "batch-size")?,
        lr: f.lr.unwrap_or(base.lr),
        seed,
        clip_norm: clip(f.clip_norm, base.clip_norm),
    })
}

/// Feature rows of every plan in a corpus, or rows read from a FeatureBundle JSONL.
fn load_rows(
    ctx: &mut Ctx,
    corpus: Option<&Path>,
    rows: Option<&Path>,
    catalog: Option<&Path>,
    schema: &FeatureSchema,
) -> Result<Vec<FeatureBundle>, CliError> {
    match (corpus, rows) {
        (Some(path), None) => {
            let (header, plans) = load_corpus(ctx, path)?;
            let catalog: Catalog = load_catalog(ctx, catalog, Some(&header))?;
            let mut out = Vec::new();
            for p in &plans {
                let mut rows = build_training_rows(&p.tree, &catalog, &p.config, schema)?;
                for r in &mut rows {
                    r.plan_id = Some(p.id.clone());
                }
                out.extend(rows);
            }
            Ok(out)
        }
        (None, Some(path)) => {
            let text = ctx.read_text(path)?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1))))
                .collect()
        }
        _ => Err(CliError::usage("give exactly one of --corpus and --rows")),
    }
}

fn save_perf_set(ctx: &mut Ctx, dir: &Path, set: &PerfEncoderSet) -> Result<(), CliError> {
    for m in &set.models {
        ctx.write_checkpoint(&dir.join(perf_file(m.group)), &m.to_bytes())?;
    }
    Ok(())
}

/// Pretrain the four operator-group performance encoders.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainPerfArgs {
    /// Oracle-labeled corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// FeatureBundle JSONL, instead of a corpus.
    #[arg(long)]
    pub rows: Option<PathBuf>,
    /// Catalog statistics JSONL; the corpus spec's catalog when absent.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Node feature schema JSON; the built-in schema when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: PerfFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: PerfTrainFlags,
    /// Also train both architectures per group at a matched parameter budget.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub compare: Option<bool>,
    /// Checkpoint directory, one `<group>.qpck` per group.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the feature rows as FeatureBundle JSONL.
    #[arg(long)]
    pub rows_out: Option<PathBuf>,
}

impl Step for PretrainPerfArgs {
    const NAME: &'static str = "pretrain-perf";
    const OUTPUT_IS_DIR: bool = true;

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.corpus, &mut self.rows, &mut self.catalog, &mut self.schema]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out, &mut self.report, &mut self.rows_out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let out = req_path(&self.out, "out")?;
        let schema = load_schema(ctx, self.schema.as_deref())?;
        let (config, arch) = perf_config(&self.model, &schema)?;
        let opts = perf_options(&self.train, ctx.seed)?;
        let rows = load_rows(ctx, self.corpus.as_deref(), self.rows.as_deref(), self.catalog.as_deref(), &schema)?;
        if let Some(p) = &self.rows_out {
            let text: String = rows.iter().map(|r| to_json_line(r) + "\n").collect();
            ctx.write(p, text)?;
        }
        let (set, reports) = train_all(&rows, &config, arch, &schema, &opts)?;
        if set.models.is_empty() {
            return Err(CliError::data("no operator group has training rows"));
        }
        save_perf_set(ctx, out, &set)?;
        for r in &reports {
            let ratio = r.test_mae[TOTAL_TIME] / r.test_label_std[TOTAL_TIME];
            ctx.println(format!(
                "{}: total-time test MAE {:.3} ms, label std {:.3}, ratio {ratio:.3}, best epoch {} of {}",
                r.group.name(),
                r.test_mae[TOTAL_TIME],
                r.test_label_std[TOTAL_TIME],
                r.best_epoch + 1,
                r.epochs_run
            ));
            ctx.note(&format!("{}_mae_ratio", r.group.name().to_lowercase()), ratio);
        }
        let comparison = if self.compare == Some(true) {
            compare_architectures(&rows, &config, &schema, &opts)?
        } else {
            Vec::new()
        };
        if let Some(p) = &self.report {
            write_json(ctx, p, &Report::Perf { reports, comparison })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Structure,
    Perf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneModeArg {
    FinetuneAll,
    FixedFeatures,
}

impl From<FinetuneModeArg> for FinetuneMode {
    fn from(m: FinetuneModeArg) -> Self {
        match m {
            FinetuneModeArg::FinetuneAll => FinetuneMode::FinetuneAll,
            FinetuneModeArg::FixedFeatures => FinetuneMode::FixedFeatures,
        }
    }
}

/// Finetune pretrained encoders on fractions of a new domain, against scratch training.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub target: Option<Target>,
    /// Structure checkpoint, or performance-encoder directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// New-domain corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// New-domain pairs (structure target).
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Training fractions of the new-domain train split.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Structure target: finetuning modes to run.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub modes: Option<Vec<FinetuneModeArg>>,
    /// Structure target: also train from scratch on each subset. Performance encoders always are.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub scratch: Option<bool>,
    /// Structure target: epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Performance target: epochs.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Save the model finetuned (first mode) at the last fraction.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl Step for FinetuneArgs {
    const NAME: &'static str = "finetune";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.checkpoint, &mut self.corpus, &mut self.pairs, &mut self.catalog, &mut self.schema]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.report, &mut self.out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let fractions = self.fractions.clone().unwrap_or_else(|| vec![0.1, 0.3, 0.5, 1.0]);
        check_fractions(&fractions)?;
        let checkpoint = req_path(&self.checkpoint, "checkpoint")?;
        let corpus = req_path(&self.corpus, "corpus")?;
        let report = match *req(&self.target, "target")? {
            Target::Structure => {
                let opts = ppsr_options(
                    &PpsrFlags {
                        epochs: self.epochs,
                        batch_size: self.batch_size,
                        lr: self.lr,
                        patience: self.patience,
                        min_delta: self.min_delta,
                        clip_norm: self.clip_norm,
                    },
                    ctx.seed,
                )?;
                let modes: Vec<FinetuneMode> = self
                    .modes
                    .clone()
                    .unwrap_or_else(|| vec![FinetuneModeArg::FinetuneAll, FinetuneModeArg::FixedFeatures])
                    .into_iter()
                    .map(Into::into)
                    .collect();
                if modes.is_empty() {
                    return Err(CliError::usage("--modes is empty"));
                }
                let pretrained = load_structure(ctx, checkpoint)?;
                let (plans, pairs) = plans_and_pairs(ctx, corpus, req_path(&self.pairs, "pairs")?)?;
                let rows = fraction_sweep(
                    &pretrained,
                    &plans,
                    &pairs.train,
                    &pairs.dev,
                    &pairs.test,
                    &fractions,
                    &modes,
                    self.scratch.unwrap_or(true),
                    &opts,
                )?;
                for r in &rows {
                    ctx.println(format!("fraction {} {}: test MAE {:.4}", r.fraction, r.mode, r.test_mae));
                }
                if let Some(out) = &self.out {
                    let last = *fractions.last().expect("checked non-empty");
                    let (model, _) = finetune_structure(&pretrained, &plans, &pairs.train, &pairs.dev, last, modes[0], &opts)?;
                    ctx.write_checkpoint(out, &model.to_bytes())?;
                }
                Report::StructureFinetune { rows }
            }
            Target::Perf => {
                let opts = perf_options(
                    &PerfTrainFlags {
                        max_epochs: self.max_epochs,
                        patience: self.patience,
                        min_delta: self.min_delta,
                        batch_size: self.batch_size,
                        lr: self.lr,
                        clip_norm: self.clip_norm,
                    },
                    ctx.seed,
                )?;
                let schema = load_schema(ctx, self.schema.as_deref())?;
                let set = load_perf_set(ctx, checkpoint, &schema)?;
                let rows = load_rows(ctx, Some(corpus), None, self.catalog.as_deref(), &schema)?;
                let table = finetune_table(&set, &rows, &fractions, &schema, &opts)?;
                for r in &table {
                    ctx.println(format!(
                        "{} fraction {} {}: total-time test MAE {:.3}",
                        r.group.name(),
                        r.fraction,
                        r.variant,
                        r.test_mae[TOTAL_TIME]
                    ));
                }
                if let Some(out) = &self.out {
                    let last = *fractions.last().expect("checked non-empty");
                    let mut tuned = PerfEncoderSet::default();
                    for m in &set.models {
                        tuned.models.push(finetune_perf(m, &rows, last, &opts)?.0);
                    }
                    save_perf_set(ctx, out, &tuned)?;
                }
                Report::PerfFinetune { rows: table }
            }
        };
        if let Some(p) = &self.report {
            write_json(ctx, p, &report)?;
        }
        Ok(())
    }
}

//! Downstream tasks: latency prediction and query classification.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use qplan_core::plan::FeatureSchema;
use qplan_models::downstream::{
    accuracy_table, latency_ablations, reshape_sweep, train_classifier, train_latency, Ablation, ClassifierConfig,
    ClusterMap, DownstreamSample, DownstreamTrainOptions, EncoderMode, Encoders, LatencyModel, LatencyModelConfig,
    LatencySummary, QueryClassifier,
};
use qplan_models::perf::PerfEncoderSet;
use qplan_models::structure::StructureModel;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::data::write_json;
use super::report::Report;
use super::{check_fractions, clip, positive, req_path, to_json_line, AblationArg, EncoderModeArg, Step};
use crate::context::Ctx;
use crate::error::CliError;
use crate::inputs::{load_perf_set, load_schema, load_structure, load_workload, Sources, Workload};

/// Pretrained encoder checkpoints.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderPaths {
    /// Structure-encoder checkpoint.
    #[arg(long)]
    pub structure: Option<PathBuf>,
    /// Performance-encoder checkpoint directory.
    #[arg(long)]
    pub perf: Option<PathBuf>,
    /// Node feature schema JSON; the built-in schema when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

struct Loaded {
    structure: StructureModel,
    perf: PerfEncoderSet,
    schema: FeatureSchema,
}

impl Loaded {
    fn read(ctx: &mut Ctx, paths: &EncoderPaths) -> Result<Self, CliError> {
        let schema = load_schema(ctx, paths.schema.as_deref())?;
        let structure = load_structure(ctx, req_path(&paths.structure, "structure")?)?;
        let perf = load_perf_set(ctx, req_path(&paths.perf, "perf")?, &schema)?;
        Ok(Self { structure, perf, schema })
    }

    fn samples(&self, wl: &Workload, keep_source: bool) -> Result<Vec<DownstreamSample>, CliError> {
        wl.samples(&self.structure, &self.perf, &self.schema, keep_source)
    }

    fn encoders<'a>(&'a self, wl: &'a Workload) -> Encoders<'a> {
        Encoders {
            structure: &self.structure,
            perf: &self.perf,
            catalog: &wl.catalogs[0],
            schema: &self.schema,
        }
    }
}

/// Downstream training-loop options.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Gradient-norm clip; 0 disables.
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

fn downstream_options(f: &DownstreamFlags, patience: Option<usize>, seed: u64) -> Result<DownstreamTrainOptions, CliError> {
    let base = DownstreamTrainOptions::default();
    Ok(DownstreamTrainOptions {
        epochs: positive(f.epochs.unwrap_or(base.epochs), "epochs")?,
        batch_size: positive(f.batch_size.unwrap_or(base.batch_size), "batch-size")?,
        lr: f.lr.unwrap_or(base.lr),
        seed,
        clip_norm: clip(f.clip_norm, base.clip_norm),
        patience: patience.unwrap_or(base.patience),
    })
}

fn encoder_mode(flag: Option<EncoderModeArg>) -> EncoderMode {
    flag.map(Into::into).unwrap_or_default()
}

/// Train a latency model on embedded plans and report per-template errors.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyTrainArgs {
    /// Latency corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSONL rows {plan_file, catalog_file, config_file, latency_ms, template}, instead of a corpus.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Catalog statistics JSONL for plans without their own.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoders: EncoderPaths,
    /// Width the structure embedding is projected to.
    #[arg(long)]
    pub reshape_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long, value_enum)]
    pub encoder_mode: Option<EncoderModeArg>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: DownstreamFlags,
    /// Also train one model per embedding ablation.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub ablations: Option<bool>,
    /// Also train one model per reshape width.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    /// Model checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl Step for LatencyTrainArgs {
    const NAME: &'static str = "predict-latency.train";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![
            &mut self.corpus,
            &mut self.dataset,
            &mut self.catalog,
            &mut self.encoders.structure,
            &mut self.encoders.perf,
            &mut self.encoders.schema,
        ]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out, &mut self.report]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let out = req_path(&self.out, "out")?;
        let base = LatencyModelConfig::default();
        let config = LatencyModelConfig {
            reshape_dim: self.reshape_dim.unwrap_or(base.reshape_dim),
            hidden: self.hidden.clone().unwrap_or(base.hidden.clone()),
            ablation: self.ablation.map_or(base.ablation, Into::into),
            ..base
        };
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        let opts = downstream_options(&self.train, None, ctx.seed)?;
        let mode = encoder_mode(self.encoder_mode);
        let sources = Sources {
            corpus: self.corpus.as_deref(),
            dataset: self.dataset.as_deref(),
            catalog: self.catalog.as_deref(),
            ..Sources::default()
        };
        let (wl, _) = load_workload(ctx, &sources)?;
        let enc = Loaded::read(ctx, &self.encoders)?;
        let samples = enc.samples(&wl, mode == EncoderMode::Finetune)?;
        let encoders = enc.encoders(&wl);
        let (model, report) = train_latency(&samples, &config, &opts, (mode == EncoderMode::Finetune).then_some(&encoders))?;
        let within = report.fraction_within(0.1);
        ctx.println(format!(
            "test MAE {:.3} ms (per-template mean predictor {:.3}); {:.1}% of templates within 10% of their p5-p95 spread",
            report.test_mae,
            report.baseline_test_mae,
            100.0 * within
        ));
        ctx.note("test_mae", report.test_mae);
        ctx.note("baseline_test_mae", report.baseline_test_mae);
        ctx.note("within_10pct", within);
        let mut summaries: Vec<LatencySummary> = Vec::new();
        if self.ablations == Some(true) {
            summaries.extend(latency_ablations(&samples, &config, &opts)?);
        }
        if let Some(dims) = &self.sweep {
            if dims.contains(&0) {
                return Err(CliError::usage("--sweep widths must be positive"));
            }
            summaries.extend(reshape_sweep(&samples, &config, dims, &opts)?);
        }
        for s in &summaries {
            ctx.println(format!(
                "{} reshape {}: test MAE {:.3} ms, within 10% {:.3}",
                s.ablation.name(),
                s.reshape_dim,
                s.test_mae,
                s.within_10pct
            ));
        }
        ctx.write_checkpoint(out, &model.to_bytes())?;
        if let Some(p) = &self.report {
            write_json(ctx, p, &Report::Latency { report, summaries })?;
        }
        Ok(())
    }
}

/// Plans to run a trained downstream model on.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSource {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Single plan document.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Key=value settings the single plan ran under; defaults when absent.
    #[arg(long)]
    pub db_config: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

/// Predict latencies with a trained model.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyInferArgs {
    /// Latency-model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoders: EncoderPaths,
    #[command(flatten)]
    #[serde(flatten)]
    pub source: InferSource,
    /// Latency dataset rows.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// CSV plan_id,template,predicted_ms,observed_ms.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Step for LatencyInferArgs {
    const NAME: &'static str = "predict-latency.infer";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![
            &mut self.model,
            &mut self.encoders.structure,
            &mut self.encoders.perf,
            &mut self.encoders.schema,
            &mut self.source.corpus,
            &mut self.source.plan,
            &mut self.source.db_config,
            &mut self.source.catalog,
            &mut self.dataset,
        ]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let out = req_path(&self.out, "out")?;
        let model = LatencyModel::from_bytes(&ctx.read_checkpoint(req_path(&self.model, "model")?)?)?;
        let sources = Sources {
            corpus: self.source.corpus.as_deref(),
            dataset: self.dataset.as_deref(),
            plan: self.source.plan.as_deref(),
            db_config: self.source.db_config.as_deref(),
            catalog: self.source.catalog.as_deref(),
            ..Sources::default()
        };
        let (wl, _) = load_workload(ctx, &sources)?;
        let enc = Loaded::read(ctx, &self.encoders)?;
        let samples = enc.samples(&wl, model.encoder_mode() == EncoderMode::Finetune)?;
        let batch: Vec<&DownstreamSample> = samples.iter().collect();
        let preds = model.predict(&batch)?;
        let mut csv = String::from("plan_id,template,predicted_ms,observed_ms\n");
        for (s, p) in samples.iter().zip(&preds) {
            let opt = |v: Option<String>| v.unwrap_or_default();
            let _ = writeln!(
                csv,
                "{},{},{p},{}",
                opt(s.plan_id.clone()),
                opt(s.template.map(|t| t.to_string())),
                opt(s.latency_ms.map(|v| v.to_string()))
            );
        }
        ctx.note("plans", samples.len());
        ctx.println(format!("predicted {} plans", samples.len()));
        ctx.write(out, csv)
    }
}

/// Train a query classifier over templates with a cluster regularizer.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyTrainArgs {
    /// Classification corpus; its plans carry template and cluster tags.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSONL rows {plan_file, template_id, catalog_file, config_file}, instead of a corpus.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// JSON {"template_id": cluster}; read off the corpus when absent.
    #[arg(long)]
    pub cluster_map: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoders: EncoderPaths,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Weight of the cluster loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long, value_enum)]
    pub encoder_mode: Option<EncoderModeArg>,
    /// Fraction of the training split used.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: DownstreamFlags,
    /// Epochs without a dev-accuracy gain before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Also train every ablation at each of these fractions.
    #[arg(long, value_delimiter = ',')]
    pub table_fractions: Option<Vec<f64>>,
    /// Model checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl Step for ClassifyTrainArgs {
    const NAME: &'static str = "classify.train";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![
            &mut self.corpus,
            &mut self.labels,
            &mut self.cluster_map,
            &mut self.catalog,
            &mut self.encoders.structure,
            &mut self.encoders.perf,
            &mut self.encoders.schema,
        ]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out, &mut self.report]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let out = req_path(&self.out, "out")?;
        let base = ClassifierConfig::default();
        let config = ClassifierConfig {
            hidden: self.hidden.clone().unwrap_or(base.hidden.clone()),
            lambda: self.lambda.unwrap_or(base.lambda),
            ablation: self.ablation.map_or(base.ablation, Into::into),
            ..base
        };
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        let fraction = self.fraction.unwrap_or(1.0);
        check_fractions(&[fraction])?;
        if let Some(f) = &self.table_fractions {
            check_fractions(f)?;
        }
        let opts = downstream_options(&self.train, self.patience, ctx.seed)?;
        let mode = encoder_mode(self.encoder_mode);
        let sources = Sources {
            corpus: self.corpus.as_deref(),
            labels: self.labels.as_deref(),
            catalog: self.catalog.as_deref(),
            cluster_map: self.cluster_map.as_deref(),
            ..Sources::default()
        };
        let (wl, map) = load_workload(ctx, &sources)?;
        let enc = Loaded::read(ctx, &self.encoders)?;
        let samples = enc.samples(&wl, mode == EncoderMode::Finetune)?;
        let map = match map {
            Some(m) => m,
            None => ClusterMap::from_samples(&samples).map_err(|e| CliError::data(format!("{e}; pass --cluster-map")))?,
        };
        let encoders = enc.encoders(&wl);
        let (model, report) = train_classifier(&samples, &map, &config, fraction, &opts, (mode == EncoderMode::Finetune).then_some(&encoders))?;
        ctx.println(format!(
            "test accuracy: template {:.3}, cluster {:.3} ({} training plans, {} templates, {} clusters)",
            report.test_template_acc,
            report.test_cluster_acc,
            report.n_train,
            map.n_templates(),
            map.n_clusters
        ));
        ctx.note("test_template_acc", report.test_template_acc);
        ctx.note("test_cluster_acc", report.test_cluster_acc);
        let mut rows = vec![report];
        if let Some(fractions) = &self.table_fractions {
            let table = accuracy_table(&samples, &map, &config, &Ablation::ALL, fractions, &opts)?;
            for r in &table {
                ctx.println(format!(
                    "{} fraction {}: template {:.3}, cluster {:.3}",
                    r.ablation.name(),
                    r.fraction,
                    r.test_template_acc,
                    r.test_cluster_acc
                ));
            }
            rows.extend(table);
        }
        ctx.write_checkpoint(out, &model.to_bytes())?;
        if let Some(p) = &self.report {
            write_json(ctx, p, &Report::Classifier { rows })?;
        }
        Ok(())
    }
}

/// Classify plans with a trained model.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyInferArgs {
    /// Classifier checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoders: EncoderPaths,
    #[command(flatten)]
    #[serde(flatten)]
    pub source: InferSource,
    /// Label rows; accuracy is printed against them.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// JSONL {plan_id, template, cluster, template_probs}.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Step for ClassifyInferArgs {
    const NAME: &'static str = "classify.infer";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![
            &mut self.model,
            &mut self.encoders.structure,
            &mut self.encoders.perf,
            &mut self.encoders.schema,
            &mut self.source.corpus,
            &mut self.source.plan,
            &mut self.source.db_config,
            &mut self.source.catalog,
            &mut self.labels,
        ]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let out = req_path(&self.out, "out")?;
        let model = QueryClassifier::from_bytes(&ctx.read_checkpoint(req_path(&self.model, "model")?)?)?;
        let sources = Sources {
            corpus: self.source.corpus.as_deref(),
            labels: self.labels.as_deref(),
            plan: self.source.plan.as_deref(),
            db_config: self.source.db_config.as_deref(),
            catalog: self.source.catalog.as_deref(),
            ..Sources::default()
        };
        let (wl, _) = load_workload(ctx, &sources)?;
        let enc = Loaded::read(ctx, &self.encoders)?;
        let samples = enc.samples(&wl, model.stack.is_some())?;
        let batch: Vec<&DownstreamSample> = samples.iter().collect();
        let preds = model.classify_batch(&batch)?;
        let mut text = String::new();
        let (mut labeled, mut hit_t, mut hit_c) = (0usize, 0usize, 0usize);
        for (s, p) in samples.iter().zip(&preds) {
            text.push_str(&to_json_line(&json!({
                "plan_id": s.plan_id,
                "template": p.template(),
                "cluster": p.cluster(),
                "template_probs": p.templates,
            })));
            text.push('\n');
            if let Some(t) = s.template {
                labeled += 1;
                hit_t += usize::from(p.template() == t);
                hit_c += usize::from(model.map.cluster_of.get(t) == Some(&p.cluster()));
            }
        }
        ctx.note("plans", samples.len());
        if labeled > 0 {
            let (acc_t, acc_c) = (hit_t as f64 / labeled as f64, hit_c as f64 / labeled as f64);
            ctx.note("template_accuracy", acc_t);
            ctx.note("cluster_accuracy", acc_c);
            ctx.println(format!("accuracy over {labeled} labeled plans: template {acc_t:.3}, cluster {acc_c:.3}"));
        }
        ctx.write(out, text)
    }
}

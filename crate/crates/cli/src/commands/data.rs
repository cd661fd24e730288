//! Parsing, linearization, Smatch scoring and dataset generation.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use qplan_core::datagen::{
    build_pair_dataset, default_ranges, domain_shift, gen_classification_corpus, gen_latency_corpus, gen_plans,
    lhs_configs, write_corpus, ConfigRange, CorpusHeader, ShiftParams, Split, SyntheticSpec,
};
use qplan_core::linearize::{encode_ids, linearize_with_cap, Vocabulary, DEFAULT_MAX_SEQUENCE_LENGTH};
use qplan_core::smatch::{smatch_exact, smatch_hillclimb, smatch_many, SmatchResult, DEFAULT_RESTARTS};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{positive, req, req_path, to_json_line, to_json_pretty, Step};
use crate::context::Ctx;
use crate::error::CliError;
use crate::inputs::{id_index, load_one_plan, load_plans, PairRow};

/// Parse plan documents into the canonical serialization.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParseArgs {
    /// Plan document, JSONL of plans, or corpus.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Write canonical JSON lines here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Step for ParseArgs {
    const NAME: &'static str = "parse";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.plan]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let plans = load_plans(ctx, req_path(&self.plan, "plan")?)?;
        let mut text = String::new();
        for (_, tree) in &plans {
            text.push_str(&tree.to_canonical_json());
            text.push('\n');
        }
        ctx.note("plans", plans.len());
        match &self.out {
            Some(out) => ctx.write(out, text),
            None => {
                ctx.println(text.trim_end());
                Ok(())
            }
        }
    }
}

/// Print the bracketed token sequence of each plan.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearizeArgs {
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Wrap each sequence in CLS/SEP.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub specials: Option<bool>,
    /// Longest sequence accepted, CLS/SEP included.
    #[arg(long)]
    pub max_sequence_length: Option<usize>,
    /// Vocabulary JSON; with it, per-level ids are printed as JSON.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Step for LinearizeArgs {
    const NAME: &'static str = "linearize";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.plan, &mut self.vocab]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let plans = load_plans(ctx, req_path(&self.plan, "plan")?)?;
        let vocab = match &self.vocab {
            Some(p) => Some(Vocabulary::from_json(&ctx.read_text(p)?)?),
            None => None,
        };
        let cap = self.max_sequence_length.unwrap_or(DEFAULT_MAX_SEQUENCE_LENGTH);
        let mut text = String::new();
        for (id, tree) in &plans {
            let mut seq = linearize_with_cap(tree, cap)?;
            if self.specials == Some(true) {
                seq = seq.with_specials();
            }
            match &vocab {
                Some(v) => {
                    let ids = encode_ids(&seq, v);
                    let row = json!({"id": id, "level1": ids.level1, "level2": ids.level2, "level3": ids.level3});
                    text.push_str(&to_json_line(&row));
                }
                None => text.push_str(&seq.render()),
            }
            text.push('\n');
        }
        match &self.out {
            Some(out) => ctx.write(out, text),
            None => {
                ctx.println(text.trim_end());
                Ok(())
            }
        }
    }
}

/// One pair to score in batch mode; pair-dataset rows are accepted too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRequest {
    #[serde(alias = "plan_a")]
    pub id_a: String,
    #[serde(alias = "plan_b")]
    pub id_b: String,
}

/// One scored pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id_a: String,
    pub id_b: String,
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Smatch between two plans, or over a list of pairs.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmatchArgs {
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// Batch mode: plans (corpus or JSONL) the pair ids refer to.
    #[arg(long)]
    pub plans: Option<PathBuf>,
    /// Batch mode: JSONL rows {id_a, id_b}.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Hill-climbing starts per pair.
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Exhaustive search instead of hill climbing (small trees only).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub exact: Option<bool>,
    /// JSONL rows {id_a, id_b, score, precision, recall}.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Step for SmatchArgs {
    const NAME: &'static str = "smatch";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.a, &mut self.b, &mut self.plans, &mut self.pairs]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let restarts = positive(self.restarts.unwrap_or(DEFAULT_RESTARTS), "restarts")?;
        let exact = self.exact == Some(true);
        let (scores, single) = match (&self.a, &self.b, &self.plans, &self.pairs) {
            (Some(a), Some(b), None, None) => {
                let ta = load_one_plan(ctx, a)?;
                let tb = load_one_plan(ctx, b)?;
                let r = if exact { smatch_exact(&ta, &tb)? } else { smatch_hillclimb(&ta, &tb, restarts, ctx.seed) };
                let id = |t: &qplan_core::PlanTree, p: &PathBuf| t.source_id.clone().unwrap_or_else(|| p.display().to_string());
                (vec![score_row(id(&ta, a), id(&tb, b), &r)], true)
            }
            (None, None, Some(plans), Some(pairs)) => {
                let plans = load_plans(ctx, plans)?;
                let index = id_index(plans.iter().map(|(id, _)| id.as_str()))?;
                let text = ctx.read_text(pairs)?;
                let mut requests = Vec::new();
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let r: PairRequest = serde_json::from_str(line).map_err(|e| CliError::data(format!("pairs line {}: {e}", i + 1)))?;
                    let pos = |id: &str| index.get(id).copied().ok_or_else(|| CliError::data(format!("pairs line {}: unknown plan {id:?}", i + 1)));
                    requests.push((pos(&r.id_a)?, pos(&r.id_b)?, r));
                }
                let trees: Vec<_> = requests.iter().map(|(a, b, _)| (&plans[*a].1, &plans[*b].1)).collect();
                let results = if exact {
                    trees.iter().map(|(a, b)| smatch_exact(a, b)).collect::<Result<Vec<_>, _>>()?
                } else {
                    smatch_many(&trees, restarts, ctx.seed)
                };
                let rows = requests.into_iter().zip(&results).map(|((_, _, r), s)| score_row(r.id_a, r.id_b, s)).collect();
                (rows, false)
            }
            _ => return Err(CliError::usage("give either --a and --b, or --plans and --pairs")),
        };
        if single {
            ctx.println(format!("{:?}", scores[0].score));
        } else {
            let mean = scores.iter().map(|s| s.score).sum::<f64>() / scores.len().max(1) as f64;
            ctx.println(format!("scored {} pairs, mean {mean:.4}", scores.len()));
        }
        ctx.note("pairs", scores.len());
        if let Some(out) = &self.out {
            let text: String = scores.iter().map(|s| to_json_line(s) + "\n").collect();
            ctx.write(out, text)?;
        }
        Ok(())
    }
}

fn score_row(id_a: String, id_b: String, r: &SmatchResult) -> PairScore {
    PairScore {
        id_a,
        id_b,
        score: r.score,
        precision: r.precision,
        recall: r.recall,
    }
}

/// Latin Hypercube sample of database configurations.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfigsArgs {
    /// Number of configurations.
    #[arg(long)]
    pub n: Option<usize>,
    /// JSON list of ranges {name, unit, low, high, scale}; built-in ranges when absent.
    #[arg(long)]
    pub ranges: Option<PathBuf>,
    /// Receives `config-NNN.conf` per sample and `configs.csv`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl Step for GenConfigsArgs {
    const NAME: &'static str = "gen-configs";
    const OUTPUT_IS_DIR: bool = true;

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.ranges]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out_dir]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let n = positive(*req(&self.n, "n")?, "n")?;
        let dir = req_path(&self.out_dir, "out-dir")?;
        let ranges: Vec<ConfigRange> = match &self.ranges {
            Some(p) => serde_json::from_str(&ctx.read_text(p)?).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?,
            None => default_ranges(),
        };
        let configs = lhs_configs(n, &ranges, ctx.seed)?;
        let width = (n - 1).to_string().len().max(3);
        let mut csv = String::from("file");
        for r in &ranges {
            csv.push(',');
            csv.push_str(&r.name);
        }
        csv.push('\n');
        for (i, c) in configs.iter().enumerate() {
            let name = format!("config-{i:0width$}.conf");
            ctx.write(&dir.join(&name), c.to_kv())?;
            csv.push_str(&name);
            for r in &ranges {
                let _ = write!(csv, ",{}", c.get(&r.name));
            }
            csv.push('\n');
        }
        ctx.write(&dir.join("configs.csv"), csv)?;
        ctx.note("configs", n);
        ctx.println(format!("wrote {n} configurations"));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Independent plans, each under its own configuration.
    Plans,
    /// Templates run under a shared set of configurations, with latencies.
    Latency,
    /// Clustered templates with perturbed instances.
    Classification,
}

/// Generate a synthetic plan corpus labeled by the cost oracle.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenPlansArgs {
    #[arg(long, value_enum)]
    pub kind: Option<CorpusKind>,
    /// Plans (kind plans).
    #[arg(long)]
    pub n: Option<usize>,
    /// Templates (kind latency).
    #[arg(long)]
    pub templates: Option<usize>,
    /// Configurations per template (kind latency).
    #[arg(long)]
    pub configs: Option<usize>,
    /// Clusters (kind classification).
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub templates_per_cluster: Option<usize>,
    /// Instances per template (kind classification).
    #[arg(long)]
    pub instances: Option<usize>,
    /// Chance that an instance re-draws each operator method.
    #[arg(long)]
    pub perturb_prob: Option<f64>,
    /// Synthetic spec as JSON; the built-in decision-support spec when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Domain shift: fraction of hash-join and seq-scan weight moved to other methods.
    #[arg(long)]
    pub op_shift: Option<f64>,
    /// Domain shift: multiplier on relation sizes.
    #[arg(long)]
    pub row_scale: Option<f64>,
    /// Domain shift: multiplier on the oracle time coefficients.
    #[arg(long)]
    pub coeff_scale: Option<f64>,
    /// Domain shift: XORed into the spec seed.
    #[arg(long)]
    pub shift_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the spec's catalog statistics as JSONL.
    #[arg(long)]
    pub catalog_out: Option<PathBuf>,
}

impl GenPlansArgs {
    fn shift(&self) -> Option<ShiftParams> {
        let any = self.op_shift.is_some() || self.row_scale.is_some() || self.coeff_scale.is_some() || self.shift_seed.is_some();
        any.then(|| ShiftParams {
            op_shift: self.op_shift.unwrap_or(0.0),
            row_scale: self.row_scale.unwrap_or(1.0),
            coeff_scale: self.coeff_scale.unwrap_or(1.0),
            seed_offset: self.shift_seed.unwrap_or(0),
        })
    }
}

impl Step for GenPlansArgs {
    const NAME: &'static str = "gen-plans";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.spec]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out, &mut self.catalog_out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let out = req_path(&self.out, "out")?;
        let mut spec = match &self.spec {
            Some(p) => serde_json::from_str::<SyntheticSpec>(&ctx.read_text(p)?).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?,
            None => SyntheticSpec::tpch_like(ctx.seed),
        };
        spec.seed = ctx.seed;
        let shift = self.shift();
        if let Some(s) = &shift {
            spec = domain_shift(&spec, s);
        }
        let kind = self.kind.unwrap_or(CorpusKind::Plans);
        let mut params = serde_json::Map::new();
        let plans = match kind {
            CorpusKind::Plans => {
                let n = positive(self.n.unwrap_or(1000), "n")?;
                params.insert("n".into(), json!(n));
                gen_plans(&spec, n)?
            }
            CorpusKind::Latency => {
                let t = positive(self.templates.unwrap_or(20), "templates")?;
                let c = positive(self.configs.unwrap_or(30), "configs")?;
                params.insert("templates".into(), json!(t));
                params.insert("configs".into(), json!(c));
                gen_latency_corpus(&spec, t, c)?
            }
            CorpusKind::Classification => {
                let k = positive(self.clusters.unwrap_or(10), "clusters")?;
                let t = positive(self.templates_per_cluster.unwrap_or(3), "templates-per-cluster")?;
                let i = positive(self.instances.unwrap_or(20), "instances")?;
                let p = self.perturb_prob.unwrap_or(0.1);
                params.insert("clusters".into(), json!(k));
                params.insert("templates_per_cluster".into(), json!(t));
                params.insert("instances".into(), json!(i));
                params.insert("perturb_prob".into(), json!(p));
                gen_classification_corpus(&spec, k, t, i, p)?
            }
        };
        if let Some(s) = &shift {
            params.insert("shift".into(), serde_json::to_value(s).expect("shift serializes"));
        }
        let kind_name = kind.to_possible_value().expect("named variant").get_name().to_owned();
        let mut header = CorpusHeader::new(&kind_name, &spec, plans.len());
        header.params = params.into_iter().collect();
        ctx.write(out, write_corpus(&header, &plans))?;
        if let Some(cat) = &self.catalog_out {
            ctx.write(cat, spec.catalog().to_jsonl())?;
        }
        ctx.note("plans", plans.len());
        ctx.println(format!("wrote {} plans ({kind_name} corpus)", plans.len()));
        Ok(())
    }
}

/// Sample plan pairs and score them with Smatch.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildPairsArgs {
    /// Plans to pair (corpus or JSONL).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// Hill-climbing starts per pair.
    #[arg(long)]
    pub restarts: Option<usize>,
    /// JSONL rows {plan_a, plan_b, smatch, split}.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Step for BuildPairsArgs {
    const NAME: &'static str = "build-pairs";

    fn inputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.corpus]
    }

    fn outputs(&mut self) -> Vec<&mut Option<PathBuf>> {
        vec![&mut self.out]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), CliError> {
        let out = req_path(&self.out, "out")?;
        let plans = load_plans(ctx, req_path(&self.corpus, "corpus")?)?;
        id_index(plans.iter().map(|(id, _)| id.as_str()))?;
        let n = positive(self.n_pairs.unwrap_or(2000), "n-pairs")?;
        let restarts = positive(self.restarts.unwrap_or(DEFAULT_RESTARTS), "restarts")?;
        let trees: Vec<_> = plans.iter().map(|(_, t)| t.clone()).collect();
        let ds = build_pair_dataset(&trees, n, ctx.seed, restarts)?;
        let mut split = vec![Split::Train; ds.pairs.len()];
        for &i in &ds.splits.dev {
            split[i] = Split::Dev;
        }
        for &i in &ds.splits.test {
            split[i] = Split::Test;
        }
        let mut text = String::new();
        for (p, s) in ds.pairs.iter().zip(split) {
            let row = PairRow {
                plan_a: plans[p.a].0.clone(),
                plan_b: plans[p.b].0.clone(),
                smatch: p.score,
                split: Some(s),
            };
            text.push_str(&to_json_line(&row));
            text.push('\n');
        }
        ctx.write(out, text)?;
        ctx.note("pairs", ds.pairs.len());
        ctx.note("pruned_plans", ds.pruned);
        ctx.note("score_summary", &ds.summary);
        ctx.println(format!(
            "wrote {} pairs (train {}, dev {}, test {}), mean smatch {:.4}, std {:.4}",
            ds.pairs.len(),
            ds.splits.train.len(),
            ds.splits.dev.len(),
            ds.splits.test.len(),
            ds.summary.mean,
            ds.summary.std
        ));
        Ok(())
    }
}

/// Writes `value` as pretty JSON; used by commands that emit a single document.
pub(crate) fn write_json(ctx: &mut Ctx, path: &std::path::Path, value: &impl Serialize) -> Result<(), CliError> {
    ctx.write(path, to_json_pretty(value))
}

//! Acceptance suite. Prints one line per criterion and exits nonzero when any
//! criterion fails or overruns its time budget.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use qplan_cli::{run_args, Outcome};
use qplan_core::datagen::{default_ranges, lhs_configs, read_corpus};
use qplan_core::linearize::{delinearize, linearize};
use qplan_core::plan::{parse_plan_document, parse_plan_value, PlanNode, PlanTree};
use qplan_core::smatch::{smatch_exact, smatch_hillclimb};
use qplan_core::OperatorTriple;
use qplan_models::downstream::{
    cluster_scores, Ablation, ClassifierConfig, ClusterMap, DownstreamSample, LatencyModelConfig, LatencyNet,
    QueryClassifier,
};
use qplan_models::perf::{Architecture, PerfEncoderConfig, PerfNet};
use qplan_models::structure::MatchingHead;
use qplan_nn::{grad_check, multihead_self_attention, GradCheckOptions, MultiHeadAttention, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const FIG1: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/fig1.json");
const FIG1_SEQUENCE: &str = "(Filter--, (Sort--, (Aggregate--, (Join-Hash-, (Loop--Nested, (Join-Hash-, (Hash--, (Loop--Nested, (Loop--Nested, Scan-Index-, Scan-Seq-) Scan-Heap-Bitmap)) Scan-Index-Bitmap) Scan-Index-) Scan-Seq-))))";

const SMATCH_PAIRS: usize = 600;
const SMATCH_RESTARTS: usize = 8;
const SMATCH_AGREEMENT: f64 = 0.95;
const GRAD_TOL: f64 = 1e-4;
const SUM_TOL: f64 = 1e-6;
const LHS_SIZES: [usize; 3] = [4, 16, 64];
const PPSR_EPOCHS: &str = "50";
const PPSR_RATIO: f64 = 0.5;
const PERF_RATIO: f64 = 0.20;
const FINETUNE_FRACTION: &str = "0.3";
const FINETUNE_EPOCHS: &str = "100";
const FINETUNE_GROUPS_NEEDED: usize = 3;
const WITHIN_SPREAD: f64 = 0.68;

type Check = Result<(bool, String), String>;

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

/// Runs one criterion and prints its line.
fn criterion(n: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = f();
    let took = start.elapsed();
    let in_time = budget.map_or(true, |b| took <= b);
    let (pass, detail) = match result {
        Ok((ok, detail)) => (ok && in_time, detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let limit = budget.map_or(String::new(), |b| format!(", budget {} s", b.as_secs()));
    let late = if in_time { "" } else { ", over budget" };
    println!(
        "criterion {n:>2} {} {name}: {detail} ({:.1} s{limit}{late})",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    pass
}

/// Runs the CLI in-process; arguments starting with `@` are paths inside `dir`.
fn cli(dir: &Path, args: &[&str]) -> Result<Outcome, String> {
    let mut full = vec!["qplan".to_owned()];
    full.extend(args.iter().map(|a| match a.strip_prefix('@') {
        Some(rel) => dir.join(rel).display().to_string(),
        None => (*a).to_owned(),
    }));
    run_args(full).map_err(|e| format!("`{}`: {e}", args.join(" ")))
}

fn note(o: &Outcome, key: &str) -> Result<f64, String> {
    o.manifest.summary.get(key).and_then(Value::as_f64).ok_or_else(|| format!("run summary lacks {key}"))
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn rows(report: &Value) -> Result<&Vec<Value>, String> {
    report["rows"].as_array().ok_or_else(|| "report has no rows".to_owned())
}

fn num(v: &Value) -> Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("not a number: {v}"))
}

fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Moves zero-initialized biases off ReLU kinks.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

const POOL: [(&str, &str, &str); 8] = [
    ("Scan", "Seq", "NIL"),
    ("Scan", "Index", "NIL"),
    ("Scan", "Heap", "Bitmap"),
    ("Join", "Hash", "NIL"),
    ("Loop", "NIL", "Nested"),
    ("Aggregate", "Hash", "NIL"),
    ("Hash", "NIL", "NIL"),
    ("Materialize", "NIL", "NIL"),
];

/// Labels sharing no token with [`POOL`].
const FOREIGN: [(&str, &str, &str); 3] = [("Sort", "NIL", "NIL"), ("Limit", "NIL", "NIL"), ("Gather", "Merge", "NIL")];

fn random_tree(rng: &mut ChaCha8Rng, max_nodes: usize, pool: &[(&str, &str, &str)]) -> PlanTree {
    let n = rng.gen_range(1..=max_nodes);
    let parent: Vec<usize> = (1..n).map(|i| rng.gen_range(0..i)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..pool.len())).collect();
    fn build(i: usize, parent: &[usize], labels: &[usize], pool: &[(&str, &str, &str)]) -> PlanNode {
        let children = (1..=parent.len())
            .filter(|&c| parent[c - 1] == i)
            .map(|c| build(c, parent, labels, pool))
            .collect();
        let (a, b, c) = pool[labels[i]];
        PlanNode::with_triple(OperatorTriple::new(a, b, c), children)
    }
    PlanTree::new(build(0, &parent, &labels, pool), None)
}

fn linearization_fixture() -> Check {
    let text = fs::read_to_string(FIG1).map_err(|e| e.to_string())?;
    let tree = parse_plan_document(&text).map_err(|e| e.to_string())?;
    let got = linearize(&tree).map_err(|e| e.to_string())?.render();
    Ok((got == FIG1_SEQUENCE, format!("{} tokens rendered", got.split_whitespace().count())))
}

fn smatch_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut equal, mut above, mut self_fail) = (0usize, 0usize, 0usize);
    for k in 0..SMATCH_PAIRS {
        let a = random_tree(&mut rng, 7, &POOL);
        let b = random_tree(&mut rng, 7, &POOL);
        let exact = smatch_exact(&a, &b).map_err(|e| e.to_string())?.score;
        let hc = smatch_hillclimb(&a, &b, SMATCH_RESTARTS, k as u64).score;
        if (hc - exact).abs() < 1e-12 {
            equal += 1;
        } else if hc > exact {
            above += 1;
        }
        if smatch_hillclimb(&a, &a, SMATCH_RESTARTS, k as u64).score != 1.0 {
            self_fail += 1;
        }
    }
    let mut disjoint_nonzero = 0usize;
    for k in 0..200 {
        let (a, b, c) = FOREIGN[k % FOREIGN.len()];
        let single = PlanTree::new(PlanNode::with_triple(OperatorTriple::new(a, b, c), vec![]), None);
        let other = random_tree(&mut rng, 7, &POOL);
        let hc = smatch_hillclimb(&single, &other, SMATCH_RESTARTS, k as u64).score;
        let exact = smatch_exact(&single, &other).map_err(|e| e.to_string())?.score;
        if hc != 0.0 || exact != 0.0 {
            disjoint_nonzero += 1;
        }
    }
    let agreement = equal as f64 / SMATCH_PAIRS as f64;
    let pass = agreement >= SMATCH_AGREEMENT && above == 0 && self_fail == 0 && disjoint_nonzero == 0;
    Ok((
        pass,
        format!(
            "{equal}/{SMATCH_PAIRS} pairs equal the exhaustive score, {above} above it, {self_fail} self-pairs below 1, {disjoint_nonzero} disjoint pairs above 0"
        ),
    ))
}

fn gradient_checks() -> Check {
    let opts = GradCheckOptions::default;
    let mut errors = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 6, 3, &mut rng).map_err(|e| e.to_string())?;
    let x = rand_tensor(4, 6, &mut rng);
    let target = rand_tensor(4, 6, &mut rng);
    let r = grad_check(&store, &[x], opts(), |t, s, xs| {
        let y = attn.forward(t, s, xs[0], None);
        t.mse(y, &target, None)
    });
    errors.push(("attention", r.max_rel_error, r.passes(GRAD_TOL)));

    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut store = ParamStore::new();
    let head = MatchingHead::new(&mut store, "head", 5, &mut rng);
    let vi = rand_tensor(4, 5, &mut rng);
    let vj = rand_tensor(4, 5, &mut rng);
    let target = Tensor::new(4, 1, vec![0.1, 0.9, 0.5, 0.3]).unwrap();
    let r = grad_check(&store, &[vi, vj], opts(), |t, s, x| {
        let y = head.forward(t, s, x[0], x[1]);
        t.mse(y, &target, None)
    });
    errors.push(("matching head", r.max_rel_error, r.passes(GRAD_TOL)));

    let config = PerfEncoderConfig {
        node_width: 6,
        meta_width: 4,
        db_width: 3,
        node_hidden: vec![5, 4],
        meta_hidden: vec![3, 3],
        db_hidden: vec![3, 2],
        merge_dim: 6,
        embedding_dim: 7,
        ..PerfEncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut store = ParamStore::new();
    let net = PerfNet::new(&mut store, "perf", &config, Architecture::MultiColumn, &mut rng).map_err(|e| e.to_string())?;
    jitter(&mut store, &mut rng);
    let inputs = [rand_tensor(3, 6, &mut rng), rand_tensor(3, 4, &mut rng), rand_tensor(3, 3, &mut rng)];
    let target = rand_tensor(3, 3, &mut rng);
    let r = grad_check(&store, &inputs, opts(), |t, s, x| {
        let e = net.embedding(t, s, x[0], x[1], x[2]);
        let y = net.heads(t, s, e);
        t.mse(y, &target, None)
    });
    errors.push(("three-column stack", r.max_rel_error, r.passes(GRAD_TOL)));

    let mut worst = (0.0f64, true);
    for ablation in Ablation::ALL {
        let config = LatencyModelConfig {
            reshape_dim: 4,
            hidden: vec![6, 5],
            ablation,
            structure_dim: 5,
            perf_dim: 8,
            settings_width: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut store = ParamStore::new();
        let net = LatencyNet::new(&mut store, "lat", &config, &mut rng).map_err(|e| e.to_string())?;
        jitter(&mut store, &mut rng);
        let inputs = [rand_tensor(3, 5, &mut rng), rand_tensor(3, 8, &mut rng), rand_tensor(3, 6, &mut rng)];
        let target = Tensor::new(3, 1, vec![0.5, 2.0, 1.2]).unwrap();
        let r = grad_check(&store, &inputs, opts(), |t, s, x| {
            let sv = ablation.uses_structure().then_some(x[0]);
            let cv = ablation.uses_perf().then_some(x[1]);
            let y = net.forward(t, s, sv, cv, x[2]);
            t.mse(y, &target, None)
        });
        worst = (worst.0.max(r.max_rel_error), worst.1 && r.passes(GRAD_TOL));
    }
    errors.push(("latency head", worst.0, worst.1));

    let pass = errors.iter().all(|e| e.2);
    let detail = errors.iter().map(|(n, e, _)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((pass, format!("max relative error: {detail}")))
}

fn normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_attn = 0.0f64;
    for (n, d, h) in [(1, 4, 1), (5, 8, 2), (12, 12, 3), (40, 16, 4)] {
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", d, h, &mut rng).map_err(|e| e.to_string())?;
        let x = rand_tensor(n, d, &mut rng).scale(3.0);
        let (_, weights) = multihead_self_attention(&x, &attn, &store).map_err(|e| e.to_string())?;
        for w in &weights {
            for r in 0..w.rows() {
                worst_attn = worst_attn.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let map = ClusterMap::new((0..40).map(|t| t % 13).collect()).map_err(|e| e.to_string())?;
    let config = ClassifierConfig {
        hidden: vec![16, 16],
        structure_dim: 8,
        perf_dim: 12,
        ..ClassifierConfig::default()
    };
    let model = QueryClassifier::new(config, map.clone(), 5).map_err(|e| e.to_string())?;
    let batch: Vec<DownstreamSample> = (0..30)
        .map(|i| DownstreamSample {
            structure: (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            perf: (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            settings: (0..3).map(|_| rng.gen_range(0.0..500.0)).collect(),
            template: Some(i % 40),
            cluster: Some(map.cluster_of[i % 40]),
            latency_ms: None,
            plan_id: None,
            source: None,
        })
        .collect();
    let refs: Vec<&DownstreamSample> = batch.iter().collect();
    let (mut worst_t, mut worst_c, mut identity_breaks) = (0.0f64, 0.0f64, 0usize);
    for out in model.classify_batch(&refs).map_err(|e| e.to_string())? {
        worst_t = worst_t.max((out.templates.iter().sum::<f64>() - 1.0).abs());
        worst_c = worst_c.max((out.clusters.iter().sum::<f64>() - 1.0).abs());
        for c in 0..map.n_clusters {
            let members = map.members(c).iter().fold(0.0, |acc, &t| acc + out.templates[t]);
            if out.clusters[c] != members {
                identity_breaks += 1;
            }
        }
        if cluster_scores(&out.templates, &map) != out.clusters {
            identity_breaks += 1;
        }
    }
    let pass = worst_attn <= SUM_TOL && worst_t <= SUM_TOL && worst_c <= SUM_TOL && identity_breaks == 0;
    Ok((
        pass,
        format!(
            "largest deviation from 1: attention {worst_attn:.1e}, templates {worst_t:.1e}, clusters {worst_c:.1e}; {identity_breaks} cluster-sum mismatches"
        ),
    ))
}

fn lhs_strata() -> Check {
    let ranges = default_ranges();
    let mut checked = 0usize;
    for n in LHS_SIZES {
        for seed in 0..5u64 {
            let configs = lhs_configs(n, &ranges, seed).map_err(|e| e.to_string())?;
            if configs.len() != n {
                return Ok((false, format!("{} samples for n = {n}", configs.len())));
            }
            for r in &ranges {
                let mut strata: Vec<usize> = configs.iter().map(|c| r.stratum_of(c.get(&r.name), n)).collect();
                strata.sort_unstable();
                if strata != (0..n).collect::<Vec<_>>() {
                    return Ok((false, format!("dimension {} breaks stratification at n = {n}, seed {seed}", r.name)));
                }
                checked += 1;
            }
        }
    }
    Ok((true, format!("{checked} dimension samples hold one point per stratum")))
}

fn ppsr(dir: &Path) -> Check {
    cli(dir, &["--seed", "11", "gen-plans", "--n", "400", "--out", "@plans.jsonl"])?;
    cli(dir, &["--seed", "11", "build-pairs", "--corpus", "@plans.jsonl", "--n-pairs", "2000", "--out", "@pairs.jsonl"])?;
    let o = cli(
        dir,
        &[
            "--seed", "11", "pretrain-structure", "--corpus", "@plans.jsonl", "--pairs", "@pairs.jsonl",
            "--d-model", "32", "--heads", "2", "--layers", "1", "--d-ff", "64",
            "--epochs", PPSR_EPOCHS, "--patience", PPSR_EPOCHS, "--out", "@structure.qpck",
        ],
    )?;
    let (dev, base, epochs) = (note(&o, "best_dev_mae")?, note(&o, "baseline_dev_mae")?, note(&o, "epochs_run")?);
    let ratio = dev / base;
    Ok((
        ratio <= PPSR_RATIO && epochs <= 50.0,
        format!("dev MAE {dev:.4} vs mean predictor {base:.4} (ratio {ratio:.3}) in {epochs} epochs"),
    ))
}

fn perf_learnability(dir: &Path) -> Check {
    cli(dir, &["--seed", "12", "gen-plans", "--n", "5000", "--out", "@perf-plans.jsonl"])?;
    let o = cli(
        dir,
        &[
            "--seed", "12", "pretrain-perf", "--corpus", "@perf-plans.jsonl",
            "--node-hidden", "64", "--node-hidden", "64", "--meta-hidden", "16", "--meta-hidden", "16",
            "--db-hidden", "16", "--db-hidden", "16", "--merge-dim", "128",
            "--min-delta", "5", "--patience", "100", "--max-epochs", "1000", "--out", "@perf",
        ],
    )?;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for g in ["scan", "join", "sort", "aggregate"] {
        let r = note(&o, &format!("{g}_mae_ratio"))?;
        worst = worst.max(r);
        parts.push(format!("{g} {r:.3}"));
    }
    Ok((worst <= PERF_RATIO, format!("total-time test MAE / label std: {}", parts.join(", "))))
}

fn pretraining_benefit(dir: &Path) -> Check {
    let shift = ["--op-shift", "0.5", "--row-scale", "3", "--coeff-scale", "1.5", "--shift-seed", "77"];
    let mut gen = vec!["--seed", "21", "gen-plans", "--n", "400", "--out", "@shifted.jsonl"];
    gen.extend(shift);
    cli(dir, &gen)?;
    cli(dir, &["--seed", "21", "build-pairs", "--corpus", "@shifted.jsonl", "--n-pairs", "2000", "--out", "@shifted-pairs.jsonl"])?;
    cli(
        dir,
        &[
            "--seed", "21", "finetune", "--target", "structure", "--checkpoint", "@structure.qpck",
            "--corpus", "@shifted.jsonl", "--pairs", "@shifted-pairs.jsonl", "--fractions", FINETUNE_FRACTION,
            "--modes", "finetune-all", "--epochs", FINETUNE_EPOCHS, "--patience", FINETUNE_EPOCHS, "--report", "@finetune-structure.json",
        ],
    )?;
    cli(
        dir,
        &[
            "--seed", "21", "finetune", "--target", "perf", "--checkpoint", "@perf", "--corpus", "@shifted.jsonl",
            "--fractions", FINETUNE_FRACTION, "--max-epochs", FINETUNE_EPOCHS, "--report", "@finetune-perf.json",
        ],
    )?;

    let report = read_json(&dir.join("finetune-structure.json"))?;
    let mae_of = |mode: &str| -> Result<f64, String> {
        let row = rows(&report)?.iter().find(|r| r["mode"] == mode).ok_or_else(|| format!("no {mode} row"))?;
        num(&row["test_mae"])
    };
    let (pre, scratch) = (mae_of("finetune-all")?, mae_of("scratch")?);
    let structure_wins = pre < scratch;

    let report = read_json(&dir.join("finetune-perf.json"))?;
    let perf_rows = rows(&report)?;
    let mut wins = 0usize;
    let mut parts = Vec::new();
    for row in perf_rows.iter().filter(|r| r["variant"] == "pretrained") {
        let other = perf_rows
            .iter()
            .find(|r| r["variant"] == "scratch" && r["group"] == row["group"])
            .ok_or_else(|| format!("no scratch row for {}", row["group"]))?;
        let (p, s) = (num(&row["test_mae"][1])?, num(&other["test_mae"][1])?);
        wins += usize::from(p < s);
        parts.push(format!("{} {p:.2} vs {s:.2}", row["group"].as_str().unwrap_or("?").to_lowercase()));
    }
    Ok((
        structure_wins && wins >= FINETUNE_GROUPS_NEEDED,
        format!(
            "structure {pre:.4} vs scratch {scratch:.4}; groups better than scratch {wins}/{} ({})",
            parts.len(),
            parts.join(", ")
        ),
    ))
}

fn latency_variability(dir: &Path) -> Check {
    cli(dir, &["--seed", "0", "gen-plans", "--kind", "latency", "--templates", "20", "--configs", "60", "--out", "@latency.jsonl"])?;
    let o = cli(
        dir,
        &[
            "--seed", "0", "predict-latency", "train", "--corpus", "@latency.jsonl",
            "--structure", "@structure.qpck", "--perf", "@perf",
            "--hidden", "256", "--hidden", "256", "--epochs", "200", "--batch-size", "32", "--lr", "1e-3", "--out", "@latency.qpck",
        ],
    )?;
    let within = note(&o, "within_10pct")?;
    let (mae, base) = (note(&o, "test_mae")?, note(&o, "baseline_test_mae")?);
    Ok((
        within >= WITHIN_SPREAD,
        format!("{:.1}% of templates within 10% of their p5-p95 spread; test MAE {mae:.2} ms vs per-template mean {base:.2} ms", within * 100.0),
    ))
}

/// Operator triples and child counts in root-first order; what a token sequence keeps of a tree.
fn shape(t: &PlanTree) -> Vec<(OperatorTriple, usize)> {
    t.nodes().iter().map(|n| (n.triple.clone(), n.children.len())).collect()
}

fn round_trip_and_replay(dir: &Path) -> Check {
    let fig1 = FIG1.to_owned();
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen-plans", "--n", "80", "--out", "@plans.jsonl"],
        vec!["gen-plans", "--kind", "latency", "--templates", "4", "--configs", "6", "--out", "@latency.jsonl"],
        vec!["gen-plans", "--kind", "classification", "--clusters", "2", "--templates-per-cluster", "2", "--instances", "6", "--out", "@classes.jsonl"],
        vec!["gen-configs", "--n", "4", "--out-dir", "@configs"],
        vec!["parse", "--plan", "@plans.jsonl", "--out", "@canonical.jsonl"],
        vec!["linearize", "--plan", &fig1, "--out", "@sequence.txt"],
        vec!["build-pairs", "--corpus", "@plans.jsonl", "--n-pairs", "66", "--out", "@pairs.jsonl"],
        vec!["smatch", "--plans", "@plans.jsonl", "--pairs", "@pairs.jsonl", "--out", "@scores.jsonl"],
        vec![
            "pretrain-structure", "--corpus", "@plans.jsonl", "--pairs", "@pairs.jsonl", "--d-model", "8", "--heads", "2",
            "--layers", "1", "--d-ff", "16", "--epochs", "2", "--out", "@s.qpck", "--report", "@s.json",
        ],
        vec![
            "pretrain-perf", "--corpus", "@plans.jsonl", "--node-hidden", "8", "--meta-hidden", "4", "--db-hidden", "4",
            "--merge-dim", "8", "--max-epochs", "3", "--out", "@perf",
        ],
        vec![
            "finetune", "--target", "structure", "--checkpoint", "@s.qpck", "--corpus", "@plans.jsonl", "--pairs",
            "@pairs.jsonl", "--fractions", "0.5", "--epochs", "2", "--report", "@fs.json",
        ],
        vec![
            "finetune", "--target", "perf", "--checkpoint", "@perf", "--corpus", "@plans.jsonl", "--fractions", "0.5",
            "--max-epochs", "2", "--report", "@fp.json",
        ],
        vec![
            "predict-latency", "train", "--corpus", "@latency.jsonl", "--structure", "@s.qpck", "--perf", "@perf",
            "--hidden", "8", "--epochs", "2", "--out", "@latency.qpck",
        ],
        vec![
            "predict-latency", "infer", "--model", "@latency.qpck", "--structure", "@s.qpck", "--perf", "@perf",
            "--corpus", "@latency.jsonl", "--out", "@predicted.csv",
        ],
        vec![
            "classify", "train", "--corpus", "@classes.jsonl", "--structure", "@s.qpck", "--perf", "@perf", "--hidden", "8",
            "--epochs", "2", "--out", "@classifier.qpck",
        ],
        vec![
            "classify", "infer", "--model", "@classifier.qpck", "--structure", "@s.qpck", "--perf", "@perf", "--corpus",
            "@classes.jsonl", "--out", "@classified.jsonl",
        ],
        vec!["report", "--input", "@s.json", "--out", "@s.csv"],
    ];
    let mut reproduced = 0usize;
    for (k, step) in steps.iter().enumerate() {
        let manifest = format!("@m{k}.json");
        let into = format!("@replay{k}");
        let mut args = vec!["--seed", "3", "--manifest", &manifest];
        args.extend(step.iter().copied());
        cli(dir, &args)?;
        cli(dir, &["replay", &manifest, "--into", &into])?;
        reproduced += 1;
    }

    let (_, plans) = read_corpus(&fs::read_to_string(dir.join("plans.jsonl")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut trees: Vec<PlanTree> = plans.into_iter().map(|p| p.tree).collect();
    trees.push(parse_plan_document(&fs::read_to_string(FIG1).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?);
    let (mut parse_breaks, mut linear_breaks) = (0usize, 0usize);
    for t in &trees {
        let text = serde_json::to_string(&t.to_canonical_value()).map_err(|e| e.to_string())?;
        let back = parse_plan_value(serde_json::from_str(&text).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        parse_breaks += usize::from(&back != t);
        let seq = linearize(t).map_err(|e| e.to_string())?;
        let tree = delinearize(&seq).map_err(|e| e.to_string())?;
        linear_breaks += usize::from(shape(&tree.normalized()) != shape(&t.normalized()));
    }
    Ok((
        parse_breaks == 0 && linear_breaks == 0 && reproduced == steps.len(),
        format!(
            "{} plans: {parse_breaks} parse round-trip and {linear_breaks} linearization mismatches; {reproduced}/{} commands replayed bit-identically",
            trees.len(),
            steps.len()
        ),
    ))
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let dir = work.path();
    let small = tempfile::tempdir().expect("temporary directory");
    let results = [
        criterion(1, "linearization fixture", Some(Duration::from_secs(1)), linearization_fixture),
        criterion(2, "smatch oracle equivalence", minutes(2), smatch_oracle),
        criterion(3, "gradient checks", minutes(1), gradient_checks),
        criterion(4, "normalization invariants", None, normalization),
        criterion(5, "LHS stratification", Some(Duration::from_secs(1)), lhs_strata),
        criterion(6, "PPSR learnability", minutes(15), || ppsr(dir)),
        criterion(7, "performance-encoder learnability", minutes(20), || perf_learnability(dir)),
        criterion(8, "pretraining benefit", minutes(30), || pretraining_benefit(dir)),
        criterion(9, "latency variability", minutes(15), || latency_variability(dir)),
        criterion(10, "round trips and replay", None, || round_trip_and_replay(small.path())),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}

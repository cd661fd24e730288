//! Downstream tasks on top of `S(p)` and `C(p)`: query latency regression and
//! query template/cluster classification.
//!
//! Encoders are frozen by default: samples carry precomputed embeddings. In
//! [`EncoderMode::Finetune`] the encoders are rebuilt inside the downstream
//! parameter store from their checkpoints and trained end to end.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use qplan_core::catalog::{Catalog, DbConfig, SETTINGS};
use qplan_core::datagen::{GeneratedPlan, Splits};
use qplan_core::linearize::EncodedIds;
use qplan_core::plan::{FeatureSchema, OperatorGroup, PlanTree};
use qplan_nn::checkpoint::{self, CheckpointHeader};
use qplan_nn::{softmax_rows, Activation, Adam, BatchNorm, Linear, Mlp, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::metrics::{mean, percentile, take_fraction, EarlyStopping, Standardizer};
use crate::perf::{build_training_rows, Architecture, FeatureBundle, PerfEncoderConfig, PerfEncoderSet, PerfNet, PerfNormalizer};
use crate::structure::{restore_values, StructureEncoder, StructureEncoderConfig, StructureModel, ENCODER_PREFIX};
use crate::{check_fraction, ModelError};

pub const LATENCY_ARCHITECTURE: &str = "latency-model/1";
pub const CLASSIFIER_ARCHITECTURE: &str = "query-classifier/1";
/// Structure-embedding widths of the reshape sweep.
pub const RESHAPE_SWEEP: [usize; 6] = [32, 64, 96, 128, 160, 192];

/// Which embeddings feed a downstream model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Both,
    StructureOnly,
    PerformanceOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Both, Ablation::StructureOnly, Ablation::PerformanceOnly];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Both => "both",
            Ablation::StructureOnly => "structure-only",
            Ablation::PerformanceOnly => "performance-only",
        }
    }

    pub fn uses_structure(self) -> bool {
        self != Ablation::PerformanceOnly
    }

    pub fn uses_perf(self) -> bool {
        self != Ablation::StructureOnly
    }
}

/// Whether encoder parameters move during downstream training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// Precomputed embeddings; encoder checkpoints are untouched.
    #[default]
    FixedFeatures,
    /// Encoders are copied into the downstream model and trained with it.
    Finetune,
}

/// Plan inputs needed to recompute embeddings in [`EncoderMode::Finetune`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSource {
    pub ids: EncodedIds,
    /// Cumulative rows of the groups present in the plan.
    pub bundles: Vec<FeatureBundle>,
}

/// One plan with its embeddings, raw settings and task labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamSample {
    pub structure: Vec<f64>,
    pub perf: Vec<f64>,
    pub settings: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<String>,
    #[serde(skip)]
    pub source: Option<SampleSource>,
}

/// Loaded encoders and the inputs they need.
#[derive(Debug, Clone, Copy)]
pub struct Encoders<'a> {
    pub structure: &'a StructureModel,
    pub perf: &'a PerfEncoderSet,
    pub catalog: &'a Catalog,
    pub schema: &'a FeatureSchema,
}

impl Encoders<'_> {
    /// Embeds one plan run under `config`. With `keep_source` the ids and
    /// cumulative rows are kept for end-to-end finetuning.
    pub fn sample(&self, tree: &PlanTree, config: &DbConfig, keep_source: bool) -> Result<DownstreamSample, ModelError> {
        self.perf.check_complete()?;
        let ids = self.structure.ids(tree)?;
        let rows = build_training_rows(tree, self.catalog, config, self.schema)?;
        let structure = self.structure.embed_ids(&ids)?;
        let perf = crate::perf::perf_embed_rows(&rows, self.perf)?;
        let source = keep_source.then(|| SampleSource {
            ids,
            bundles: rows.into_iter().filter(|r| r.is_cumulative).collect(),
        });
        Ok(DownstreamSample {
            structure,
            perf,
            settings: config.feature_vector(),
            template: None,
            cluster: None,
            latency_ms: tree.root.labels.total_time,
            plan_id: tree.source_id.clone(),
            source,
        })
    }

    /// Embeds generated plans, carrying over template, cluster and latency tags.
    pub fn samples(&self, plans: &[GeneratedPlan], keep_source: bool) -> Result<Vec<DownstreamSample>, ModelError> {
        plans
            .iter()
            .map(|p| {
                let mut s = self.sample(&p.tree, &p.config, keep_source)?;
                s.template = p.template;
                s.cluster = p.cluster;
                s.latency_ms = p.latency_ms.or(s.latency_ms);
                s.plan_id = Some(p.id.clone());
                Ok(s)
            })
            .collect()
    }
}

/// Architecture of the encoders rebuilt inside a finetuned downstream model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackSpec {
    pub structure: StructureEncoderConfig,
    pub vocab_sizes: [usize; 3],
    pub perf: Vec<(OperatorGroup, PerfEncoderConfig, Architecture, PerfNormalizer)>,
}

const STACK_STRUCTURE: &str = "ds.enc";

fn stack_perf_prefix(g: OperatorGroup) -> String {
    format!("ds.perf.{}", g.name().to_lowercase())
}

/// Encoders living in a downstream parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub spec: StackSpec,
    pub structure: StructureEncoder,
    pub perf: Vec<PerfNet>,
}

impl EncoderStack {
    fn from_spec(store: &mut ParamStore, spec: StackSpec, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        let structure = StructureEncoder::new(store, STACK_STRUCTURE, &spec.structure, spec.vocab_sizes, rng)?;
        let perf = spec
            .perf
            .iter()
            .map(|(g, c, a, _)| PerfNet::new(store, &stack_perf_prefix(*g), c, *a, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { spec, structure, perf })
    }

    /// Copies the encoders' parameters into `store`.
    fn build(store: &mut ParamStore, enc: &Encoders, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        enc.perf.check_complete()?;
        let spec = StackSpec {
            structure: enc.structure.config.clone(),
            vocab_sizes: enc.structure.vocab.sizes(),
            perf: OperatorGroup::MODELED
                .iter()
                .map(|g| {
                    let m = enc.perf.get(*g).expect("checked complete");
                    (*g, m.config.clone(), m.arch(), m.norm.clone())
                })
                .collect(),
        };
        let stack = Self::from_spec(store, spec, rng)?;
        store.copy_matching(&enc.structure.store, &format!("{ENCODER_PREFIX}."), &format!("{STACK_STRUCTURE}."))?;
        for g in OperatorGroup::MODELED {
            let m = enc.perf.get(g).expect("checked complete");
            store.copy_matching(&m.store, &format!("{}.", crate::perf::PERF_PREFIX), &format!("{}.", stack_perf_prefix(g)))?;
        }
        Ok(stack)
    }

    fn source<'s>(s: &'s DownstreamSample) -> Result<&'s SampleSource, ModelError> {
        s.source
            .as_ref()
            .ok_or_else(|| ModelError::InvalidConfig("finetuned encoders need plan inputs, not precomputed embeddings".into()))
    }

    fn structure_batch(&self, tape: &mut Tape, store: &ParamStore, batch: &[&DownstreamSample]) -> Result<Var, ModelError> {
        let rows = batch
            .iter()
            .map(|s| self.structure.encode(tape, store, &Self::source(s)?.ids, None))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(tape.concat_rows(&rows))
    }

    fn perf_batch(&self, tape: &mut Tape, store: &ParamStore, batch: &[&DownstreamSample]) -> Result<Var, ModelError> {
        let mut cols = Vec::with_capacity(self.perf.len());
        for ((g, config, _, norm), net) in self.spec.perf.iter().zip(&self.perf) {
            let mut rows: Vec<&FeatureBundle> = Vec::new();
            let mut slot = Vec::with_capacity(batch.len());
            for s in batch {
                match Self::source(s)?.bundles.iter().find(|b| b.group == *g) {
                    Some(b) => {
                        slot.push(rows.len());
                        rows.push(b);
                    }
                    None => slot.push(usize::MAX),
                }
            }
            let zero = tape.constant(Tensor::zeros(1, config.embedding_dim));
            if rows.is_empty() {
                let idx = vec![0; batch.len()];
                cols.push(tape.gather_rows(zero, &idx));
                continue;
            }
            let (n, m, d) = norm.inputs(&rows);
            let (n, m, d) = (tape.constant(n), tape.constant(m), tape.constant(d));
            let emb = net.embedding(tape, store, n, m, d);
            let padded = tape.concat_rows(&[emb, zero]);
            let idx: Vec<usize> = slot.iter().map(|&i| if i == usize::MAX { rows.len() } else { i }).collect();
            cols.push(tape.gather_rows(padded, &idx));
        }
        Ok(tape.concat_cols(&cols))
    }
}

fn matrix(rows: &[&Vec<f64>], width: usize, what: &str) -> Result<Tensor, ModelError> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(ModelError::ShapeMismatch {
                what: what.into(),
                expected: width,
                found: r.len(),
            });
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::new(rows.len(), width, data)?)
}

/// `S(p)` and `C(p)` for a batch, from the stack or from the samples.
fn embedding_inputs(
    tape: &mut Tape,
    store: &ParamStore,
    stack: Option<&EncoderStack>,
    ablation: Ablation,
    dims: (usize, usize),
    batch: &[&DownstreamSample],
) -> Result<(Option<Var>, Option<Var>), ModelError> {
    let s = if !ablation.uses_structure() {
        None
    } else if let Some(st) = stack {
        Some(st.structure_batch(tape, store, batch)?)
    } else {
        let rows: Vec<&Vec<f64>> = batch.iter().map(|s| &s.structure).collect();
        Some(tape.constant(matrix(&rows, dims.0, "structure embedding")?))
    };
    let c = if !ablation.uses_perf() {
        None
    } else if let Some(st) = stack {
        Some(st.perf_batch(tape, store, batch)?)
    } else {
        let rows: Vec<&Vec<f64>> = batch.iter().map(|s| &s.perf).collect();
        Some(tape.constant(matrix(&rows, dims.1, "performance embedding")?))
    };
    Ok((s, c))
}

/// Raw settings followed by their `log1p`.
pub fn settings_features(raw: &[f64]) -> Vec<f64> {
    raw.iter().copied().chain(raw.iter().map(|v| v.max(0.0).ln_1p())).collect()
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    order
}

fn embedding_dims(samples: &[DownstreamSample]) -> Result<(usize, usize), ModelError> {
    let first = samples.first().ok_or(ModelError::EmptyDataset)?;
    Ok((first.structure.len(), first.perf.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModelConfig {
    /// Width `S(p)` is projected to before fusion.
    pub reshape_dim: usize,
    pub hidden: Vec<usize>,
    pub ablation: Ablation,
    pub structure_dim: usize,
    pub perf_dim: usize,
    pub settings_width: usize,
}

impl Default for LatencyModelConfig {
    fn default() -> Self {
        Self {
            reshape_dim: 128,
            hidden: vec![256, 256],
            ablation: Ablation::Both,
            structure_dim: 128,
            perf_dim: 4 * crate::perf::EMBEDDING_DIM,
            settings_width: SETTINGS.len(),
        }
    }
}

impl LatencyModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.reshape_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(ModelError::InvalidConfig("latency model widths must be positive".into()));
        }
        if (self.ablation.uses_structure() && self.structure_dim == 0) || (self.ablation.uses_perf() && self.perf_dim == 0) {
            return Err(ModelError::InvalidConfig("enabled embeddings must have positive width".into()));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        let mut w = 2 * self.settings_width;
        if self.ablation.uses_structure() {
            w += self.reshape_dim;
        }
        if self.ablation.uses_perf() {
            w += self.perf_dim;
        }
        w
    }
}

/// `softplus(MLP([W_r S(p); C(p); settings; log1p settings]))`, predicting
/// `log1p` of the latency in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyNet {
    pub reshape: Option<Linear>,
    pub mlp: Mlp,
    pub out: Linear,
}

impl LatencyNet {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &LatencyModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let reshape = config
            .ablation
            .uses_structure()
            .then(|| Linear::new(store, &format!("{prefix}.reshape"), config.structure_dim, config.reshape_dim, true, rng));
        let dims: Vec<usize> = std::iter::once(config.input_width()).chain(config.hidden.iter().copied()).collect();
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), &dims, Activation::Relu, true, rng);
        let out = Linear::new(store, &format!("{prefix}.out"), mlp.out_dim(), 1, true, rng);
        Ok(Self { reshape, mlp, out })
    }

    /// `B × 1` non-negative outputs in `log1p` milliseconds.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, s: Option<Var>, c: Option<Var>, settings: Var) -> Var {
        let mut parts = Vec::with_capacity(3);
        if let (Some(r), Some(s)) = (&self.reshape, s) {
            parts.push(r.forward(tape, store, s));
        }
        if let Some(c) = c {
            parts.push(c);
        }
        parts.push(settings);
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) };
        let h = self.mlp.forward(tape, store, x);
        let y = self.out.forward(tape, store, h);
        tape.softplus(y)
    }
}

pub const LATENCY_PREFIX: &str = "lat";

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    pub config: LatencyModelConfig,
    pub store: ParamStore,
    pub net: LatencyNet,
    pub settings_norm: Standardizer,
    pub stack: Option<EncoderStack>,
    pub seed: u64,
}

impl LatencyModel {
    pub fn new(config: LatencyModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = LatencyNet::new(&mut store, LATENCY_PREFIX, &config, &mut rng)?;
        Ok(Self {
            settings_norm: Standardizer::identity(2 * config.settings_width),
            config,
            store,
            net,
            stack: None,
            seed,
        })
    }

    /// A model whose encoders are copied in and trained with it.
    pub fn with_encoders(config: LatencyModelConfig, enc: &Encoders, seed: u64) -> Result<Self, ModelError> {
        let mut m = Self::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7c);
        m.stack = Some(EncoderStack::build(&mut m.store, enc, &mut rng)?);
        Ok(m)
    }

    pub fn encoder_mode(&self) -> EncoderMode {
        if self.stack.is_some() {
            EncoderMode::Finetune
        } else {
            EncoderMode::FixedFeatures
        }
    }

    fn settings_matrix(&self, batch: &[&DownstreamSample]) -> Result<Tensor, ModelError> {
        let rows: Vec<Vec<f64>> = batch
            .iter()
            .map(|s| {
                if s.settings.len() != self.config.settings_width {
                    return Err(ModelError::SchemaMismatch(format!(
                        "{} settings given, model expects {}",
                        s.settings.len(),
                        self.config.settings_width
                    )));
                }
                Ok(self.settings_norm.apply(&settings_features(&s.settings)))
            })
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Vec<f64>> = rows.iter().collect();
        matrix(&refs, 2 * self.config.settings_width, "settings")
    }

    fn forward(&self, tape: &mut Tape, batch: &[&DownstreamSample]) -> Result<Var, ModelError> {
        let dims = (self.config.structure_dim, self.config.perf_dim);
        let (s, c) = embedding_inputs(tape, &self.store, self.stack.as_ref(), self.config.ablation, dims, batch)?;
        let settings = tape.constant(self.settings_matrix(batch)?);
        Ok(self.net.forward(tape, &self.store, s, c, settings))
    }

    /// Latency predictions in milliseconds.
    pub fn predict(&self, batch: &[&DownstreamSample]) -> Result<Vec<f64>, ModelError> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, batch)?;
        Ok(tape.value(y).data().iter().map(|v| v.exp_m1().max(0.0)).collect())
    }

    pub fn predict_latency(&self, sample: &DownstreamSample) -> Result<f64, ModelError> {
        Ok(self.predict(&[sample])?[0])
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(LATENCY_ARCHITECTURE, serde_json::to_value(&self.config).expect("config serializes"));
        h.extra = json!({
            "settings_norm": self.settings_norm,
            "seed": self.seed,
            "stack": self.stack.as_ref().map(|s| &s.spec),
        });
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.header(), &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        Ok(checkpoint::save(path, &self.header(), &self.store)?)
    }

    pub fn from_checkpoint(header: &CheckpointHeader, loaded: &ParamStore) -> Result<Self, ModelError> {
        checkpoint::check_compatible(header, LATENCY_ARCHITECTURE, None, None)?;
        let bad = |e: serde_json::Error| ModelError::InvalidConfig(e.to_string());
        let config: LatencyModelConfig = serde_json::from_value(header.config.clone()).map_err(bad)?;
        let seed = header.extra["seed"].as_u64().unwrap_or(0);
        let mut m = Self::new(config, seed)?;
        m.settings_norm = serde_json::from_value(header.extra["settings_norm"].clone()).map_err(bad)?;
        let spec: Option<StackSpec> = serde_json::from_value(header.extra["stack"].clone()).map_err(bad)?;
        if let Some(spec) = spec {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7c);
            m.stack = Some(EncoderStack::from_spec(&mut m.store, spec, &mut rng)?);
        }
        checkpoint::restore_into(&mut m.store, loaded)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (h, s) = checkpoint::load(path)?;
        Self::from_checkpoint(&h, &s)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (h, s) = checkpoint::from_bytes(bytes)?;
        Self::from_checkpoint(&h, &s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Dev-metric patience (classification only).
    pub patience: usize,
}

impl Default for DownstreamTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            clip_norm: Some(5.0),
            patience: 20,
        }
    }
}

/// Per-template split: shuffles each template's samples with `seed` and
/// sends `floor(test_ratio · n)` of them (at least one when `n ≥ 2`) to test.
/// Untagged samples form one group.
pub fn stratified_split(samples: &[DownstreamSample], test_ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.template).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, mut idx) in groups {
        let salt = k.map_or(u64::MAX, |t| t as u64);
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x2545_f491_4f6c_dd1d)));
        let mut n_test = (test_ratio * idx.len() as f64).floor() as usize;
        if n_test == 0 && idx.len() >= 2 && test_ratio > 0.0 {
            n_test = 1;
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// One row of the per-template latency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRow {
    pub template: Option<usize>,
    /// Samples of the template across both splits.
    pub n: usize,
    pub n_test: usize,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
    /// Test MAE of the model, milliseconds.
    pub mae: f64,
    /// Test MAE of predicting the template's mean training latency.
    pub baseline_mae: f64,
}

impl TemplateRow {
    /// MAE as a fraction of the p95−p5 spread.
    pub fn relative_mae(&self) -> f64 {
        self.mae / (self.p95 - self.p5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub ablation: Ablation,
    pub reshape_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Mean training MSE in `log1p` space per epoch.
    pub train_curve: Vec<f64>,
    pub test_mae: f64,
    pub baseline_test_mae: f64,
    pub templates: Vec<TemplateRow>,
}

impl LatencyReport {
    /// Share of tested templates whose MAE is below `ratio` of their spread.
    pub fn fraction_within(&self, ratio: f64) -> f64 {
        let tested: Vec<&TemplateRow> = self.templates.iter().filter(|t| t.n_test > 0).collect();
        if tested.is_empty() {
            return 0.0;
        }
        tested.iter().filter(|t| t.mae < ratio * (t.p95 - t.p5)).count() as f64 / tested.len() as f64
    }
}

pub fn template_csv(rows: &[TemplateRow]) -> String {
    let mut out = String::from("template,n,n_test,median,p5,p95,mae,baseline_mae\n");
    for r in rows {
        let t = r.template.map_or_else(|| "untagged".to_string(), |t| t.to_string());
        out.push_str(&format!(
            "{t},{},{},{},{},{},{},{}\n",
            r.n, r.n_test, r.median, r.p5, r.p95, r.mae, r.baseline_mae
        ));
    }
    out
}

fn latency_of(s: &DownstreamSample) -> Result<f64, ModelError> {
    s.latency_ms
        .filter(|v| v.is_finite() && *v >= 0.0)
        .ok_or_else(|| ModelError::InvalidConfig(format!("sample {:?} has no latency", s.plan_id)))
}

/// Per-template table for a trained model.
pub fn template_report(
    model: &LatencyModel,
    samples: &[DownstreamSample],
    train: &[usize],
    test: &[usize],
) -> Result<Vec<TemplateRow>, ModelError> {
    let mut all: BTreeMap<Option<usize>, Vec<f64>> = BTreeMap::new();
    let mut train_lat: BTreeMap<Option<usize>, Vec<f64>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        all.entry(s.template).or_default().push(latency_of(s)?);
        if train.binary_search(&i).is_ok() {
            train_lat.entry(s.template).or_default().push(latency_of(s)?);
        }
    }
    let global = mean(&train_lat.values().flatten().copied().collect::<Vec<_>>());
    let batch: Vec<&DownstreamSample> = test.iter().map(|&i| &samples[i]).collect();
    let preds = model.predict(&batch)?;
    let mut errs: BTreeMap<Option<usize>, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (s, p) in batch.iter().zip(&preds) {
        let y = latency_of(s)?;
        let base = train_lat.get(&s.template).map_or(global, |v| mean(v));
        let e = errs.entry(s.template).or_default();
        e.0.push((p - y).abs());
        e.1.push((base - y).abs());
    }
    Ok(all
        .into_iter()
        .map(|(template, lat)| {
            let (model_err, base_err) = errs.remove(&template).unwrap_or_default();
            TemplateRow {
                template,
                n: lat.len(),
                n_test: model_err.len(),
                median: percentile(&lat, 50.0),
                p5: percentile(&lat, 5.0),
                p95: percentile(&lat, 95.0),
                mae: if model_err.is_empty() { f64::NAN } else { mean(&model_err) },
                baseline_mae: if base_err.is_empty() { f64::NAN } else { mean(&base_err) },
            }
        })
        .collect())
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().max(1e-12).ln()
    }
}

/// Trains `model` on `train` by MSE on `log1p` latency.
pub fn fit_latency(
    model: &mut LatencyModel,
    samples: &[DownstreamSample],
    train: &[usize],
    opts: &DownstreamTrainOptions,
) -> Result<Vec<f64>, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let targets: Vec<f64> = train.iter().map(|&i| latency_of(&samples[i]).map(f64::ln_1p)).collect::<Result<_, _>>()?;
    let feats: Vec<Vec<f64>> = train.iter().map(|&i| settings_features(&samples[i].settings)).collect();
    model.settings_norm = Standardizer::fit(&feats, 2 * model.config.settings_width);

    if let Some(b) = model.net.out.b {
        model.store.value_mut(b).set(0, 0, inverse_softplus(mean(&targets)));
    }
    let mut opt = Adam::new(opts.lr);
    opt.clip_norm = opts.clip_norm;
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let order = shuffled(train.len(), opts.seed, epoch);
        let mut sse = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<&DownstreamSample> = chunk.iter().map(|&k| &samples[train[k]]).collect();
            let target = Tensor::new(chunk.len(), 1, chunk.iter().map(|&k| targets[k]).collect())?;
            let mut tape = Tape::new();
            let y = model.forward(&mut tape, &batch)?;
            let loss = tape.mse(y, &target, None);
            sse += tape.value(loss).item() * chunk.len() as f64;
            let g = tape.backward(loss);
            let grads = tape.param_grads(&g, model.store.len());
            opt.step(&mut model.store, &grads);
        }
        curve.push(sse / train.len() as f64);
    }
    Ok(curve)
}

/// Builds a latency model for `samples`, trains it on a stratified 80:20
/// split and reports per-template errors on the held-out part.
pub fn train_latency(
    samples: &[DownstreamSample],
    config: &LatencyModelConfig,
    opts: &DownstreamTrainOptions,
    encoders: Option<&Encoders>,
) -> Result<(LatencyModel, LatencyReport), ModelError> {
    let (sd, pd) = embedding_dims(samples)?;
    let config = LatencyModelConfig {
        structure_dim: sd,
        perf_dim: pd,
        ..config.clone()
    };
    let mut model = match encoders {
        Some(enc) => LatencyModel::with_encoders(config, enc, opts.seed)?,
        None => LatencyModel::new(config, opts.seed)?,
    };
    let (train, test) = stratified_split(samples, 0.2, opts.seed);
    let train_curve = fit_latency(&mut model, samples, &train, opts)?;
    let templates = template_report(&model, samples, &train, &test)?;
    let weighted = |f: fn(&TemplateRow) -> f64| {
        let n: usize = templates.iter().map(|t| t.n_test).sum();
        templates.iter().filter(|t| t.n_test > 0).map(|t| f(t) * t.n_test as f64).sum::<f64>() / n.max(1) as f64
    };
    let report = LatencyReport {
        ablation: model.config.ablation,
        reshape_dim: model.config.reshape_dim,
        n_train: train.len(),
        n_test: test.len(),
        train_curve,
        test_mae: weighted(|t| t.mae),
        baseline_test_mae: weighted(|t| t.baseline_mae),
        templates,
    };
    Ok((model, report))
}

/// Summary line of an ablation or sweep run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub ablation: Ablation,
    pub reshape_dim: usize,
    pub test_mae: f64,
    pub baseline_test_mae: f64,
    pub within_10pct: f64,
}

impl From<&LatencyReport> for LatencySummary {
    fn from(r: &LatencyReport) -> Self {
        Self {
            ablation: r.ablation,
            reshape_dim: r.reshape_dim,
            test_mae: r.test_mae,
            baseline_test_mae: r.baseline_test_mae,
            within_10pct: r.fraction_within(0.1),
        }
    }
}

pub fn summary_csv(rows: &[LatencySummary]) -> String {
    let mut out = String::from("ablation,reshape_dim,test_mae,baseline_test_mae,within_10pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.ablation.name(),
            r.reshape_dim,
            r.test_mae,
            r.baseline_test_mae,
            r.within_10pct
        ));
    }
    out
}

/// Trains one model per ablation on the same split.
pub fn latency_ablations(
    samples: &[DownstreamSample],
    config: &LatencyModelConfig,
    opts: &DownstreamTrainOptions,
) -> Result<Vec<LatencySummary>, ModelError> {
    Ablation::ALL
        .iter()
        .map(|&ablation| {
            let c = LatencyModelConfig { ablation, ..config.clone() };
            train_latency(samples, &c, opts, None).map(|(_, r)| LatencySummary::from(&r))
        })
        .collect()
}

/// Trains one model per structure reshape width.
pub fn reshape_sweep(
    samples: &[DownstreamSample],
    config: &LatencyModelConfig,
    dims: &[usize],
    opts: &DownstreamTrainOptions,
) -> Result<Vec<LatencySummary>, ModelError> {
    dims.iter()
        .map(|&reshape_dim| {
            let c = LatencyModelConfig {
                reshape_dim,
                ablation: Ablation::Both,
                ..config.clone()
            };
            train_latency(samples, &c, opts, None).map(|(_, r)| LatencySummary::from(&r))
        })
        .collect()
}

/// Template to cluster membership; every cluster has at least one template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub cluster_of: Vec<usize>,
    pub n_clusters: usize,
}

impl ClusterMap {
    pub fn new(cluster_of: Vec<usize>) -> Result<Self, ModelError> {
        let n_clusters = cluster_of.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; n_clusters];
        for &c in &cluster_of {
            seen[c] = true;
        }
        if cluster_of.is_empty() || seen.contains(&false) {
            return Err(ModelError::InvalidConfig("every cluster needs at least one template".into()));
        }
        Ok(Self { cluster_of, n_clusters })
    }

    /// Memberships read off labelled samples.
    pub fn from_samples(samples: &[DownstreamSample]) -> Result<Self, ModelError> {
        let mut map: BTreeMap<usize, usize> = BTreeMap::new();
        for s in samples {
            let (Some(t), Some(c)) = (s.template, s.cluster) else {
                return Err(ModelError::InvalidConfig(format!("sample {:?} lacks template or cluster", s.plan_id)));
            };
            if *map.entry(t).or_insert(c) != c {
                return Err(ModelError::InvalidConfig(format!("template {t} assigned to two clusters")));
            }
        }
        Self::from_pairs(map)
    }

    fn from_pairs(map: BTreeMap<usize, usize>) -> Result<Self, ModelError> {
        let n = map.keys().next_back().map_or(0, |m| m + 1);
        if map.len() != n {
            return Err(ModelError::InvalidConfig("template ids must be contiguous from 0".into()));
        }
        Self::new(map.into_values().collect())
    }

    pub fn n_templates(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.n_templates()).filter(|&t| self.cluster_of[t] == cluster).collect()
    }

    /// `{"template_id": cluster_id, ...}`.
    pub fn to_json(&self) -> String {
        let m: BTreeMap<String, usize> = self.cluster_of.iter().enumerate().map(|(t, c)| (t.to_string(), *c)).collect();
        serde_json::to_string_pretty(&m).expect("map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let raw: HashMap<String, usize> = serde_json::from_str(text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let mut map = BTreeMap::new();
        for (k, v) in raw {
            let t: usize = k.parse().map_err(|_| ModelError::InvalidConfig(format!("template id {k:?} is not an integer")))?;
            map.insert(t, v);
        }
        Self::from_pairs(map)
    }
}

/// Cluster scores: each cluster's score is the sum of its members' template scores.
pub fn cluster_scores(template_scores: &[f64], map: &ClusterMap) -> Vec<f64> {
    let mut out = vec![0.0; map.n_clusters];
    for (t, s) in template_scores.iter().enumerate() {
        out[map.cluster_of[t]] += s;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    /// Weight of the cluster cross-entropy regularizer.
    pub lambda: f64,
    pub ablation: Ablation,
    pub structure_dim: usize,
    pub perf_dim: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            lambda: 1.0,
            ablation: Ablation::Both,
            structure_dim: 128,
            perf_dim: 4 * crate::perf::EMBEDDING_DIM,
        }
    }
}

impl ClassifierConfig {
    fn input_width(&self) -> usize {
        let mut w = 0;
        if self.ablation.uses_structure() {
            w += self.structure_dim;
        }
        if self.ablation.uses_perf() {
            w += self.perf_dim;
        }
        w
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_width() == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(ModelError::InvalidConfig("classifier widths must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::InvalidConfig(format!("lambda {} must be a non-negative number", self.lambda)));
        }
        Ok(())
    }
}

/// Batch-normalized fusion of the embeddings, a ReLU MLP and template logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierNet {
    pub bn: BatchNorm,
    pub mlp: Mlp,
    pub out: Linear,
}

impl ClassifierNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &ClassifierConfig,
        n_templates: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let width = config.input_width();
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), width);
        let dims: Vec<usize> = std::iter::once(width).chain(config.hidden.iter().copied()).collect();
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), &dims, Activation::Relu, true, rng);
        let out = Linear::new(store, &format!("{prefix}.out"), mlp.out_dim(), n_templates, true, rng);
        Ok(Self { bn, mlp, out })
    }

    fn fuse(tape: &mut Tape, s: Option<Var>, c: Option<Var>) -> Var {
        match (s, c) {
            (Some(s), Some(c)) => tape.concat_cols(&[s, c]),
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => unreachable!("config validation requires an input"),
        }
    }

    /// Template logits. In training mode the batch statistics are returned so
    /// the caller can fold them into the running estimates.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: Option<Var>,
        c: Option<Var>,
        train: bool,
    ) -> (Var, Option<qplan_nn::BatchStats>) {
        let x = Self::fuse(tape, s, c);
        let (h, stats) = if train {
            let (h, st) = self.bn.forward_train(tape, store, x);
            (h, Some(st))
        } else {
            (self.bn.forward_eval(tape, store, x), None)
        };
        let h = self.mlp.forward(tape, store, h);
        (self.out.forward(tape, store, h), stats)
    }
}

pub const CLASSIFIER_PREFIX: &str = "cls";

/// Template and cluster distributions of one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub templates: Vec<f64>,
    pub clusters: Vec<f64>,
}

impl Classification {
    pub fn template(&self) -> usize {
        argmax(&self.templates)
    }

    pub fn cluster(&self) -> usize {
        argmax(&self.clusters)
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryClassifier {
    pub config: ClassifierConfig,
    pub map: ClusterMap,
    pub store: ParamStore,
    pub net: ClassifierNet,
    pub stack: Option<EncoderStack>,
    pub seed: u64,
}

impl QueryClassifier {
    pub fn new(config: ClassifierConfig, map: ClusterMap, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ClassifierNet::new(&mut store, CLASSIFIER_PREFIX, &config, map.n_templates(), &mut rng)?;
        Ok(Self {
            config,
            map,
            store,
            net,
            stack: None,
            seed,
        })
    }

    pub fn with_encoders(config: ClassifierConfig, map: ClusterMap, enc: &Encoders, seed: u64) -> Result<Self, ModelError> {
        let mut m = Self::new(config, map, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7c);
        m.stack = Some(EncoderStack::build(&mut m.store, enc, &mut rng)?);
        Ok(m)
    }

    fn inputs(&self, tape: &mut Tape, batch: &[&DownstreamSample]) -> Result<(Option<Var>, Option<Var>), ModelError> {
        let dims = (self.config.structure_dim, self.config.perf_dim);
        embedding_inputs(tape, &self.store, self.stack.as_ref(), self.config.ablation, dims, batch)
    }

    pub fn classify_batch(&self, batch: &[&DownstreamSample]) -> Result<Vec<Classification>, ModelError> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let (s, c) = self.inputs(&mut tape, batch)?;
        let (logits, _) = self.net.logits(&mut tape, &self.store, s, c, false);
        let probs = softmax_rows(tape.value(logits), None);
        Ok((0..batch.len())
            .map(|i| {
                let templates = probs.row(i).to_vec();
                let clusters = cluster_scores(&templates, &self.map);
                Classification { templates, clusters }
            })
            .collect())
    }

    pub fn classify_query(&self, sample: &DownstreamSample) -> Result<Classification, ModelError> {
        Ok(self.classify_batch(&[sample])?.remove(0))
    }

    /// Template and cluster accuracy on labelled samples.
    pub fn accuracy(&self, batch: &[&DownstreamSample]) -> Result<(f64, f64), ModelError> {
        if batch.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let out = self.classify_batch(batch)?;
        let mut t_ok = 0;
        let mut c_ok = 0;
        for (s, o) in batch.iter().zip(&out) {
            let t = self.label(s)?;
            t_ok += usize::from(o.template() == t);
            c_ok += usize::from(o.cluster() == self.map.cluster_of[t]);
        }
        let n = batch.len() as f64;
        Ok((t_ok as f64 / n, c_ok as f64 / n))
    }

    fn label(&self, s: &DownstreamSample) -> Result<usize, ModelError> {
        match s.template {
            Some(t) if t < self.map.n_templates() => Ok(t),
            Some(t) => Err(ModelError::UnknownLabel(t)),
            None => Err(ModelError::InvalidConfig(format!("sample {:?} has no template", s.plan_id))),
        }
    }

    /// `CE(template) + λ·NLL(cluster)` for a batch, in training mode.
    pub fn loss(&self, tape: &mut Tape, batch: &[&DownstreamSample]) -> Result<(Var, qplan_nn::BatchStats), ModelError> {
        let labels: Vec<usize> = batch.iter().map(|s| self.label(s)).collect::<Result<_, _>>()?;
        let clusters: Vec<usize> = labels.iter().map(|&t| self.map.cluster_of[t]).collect();
        let (s, c) = self.inputs(tape, batch)?;
        let (logits, stats) = self.net.logits(tape, &self.store, s, c, true);
        let mut loss = tape.cross_entropy(logits, &labels);
        if self.config.lambda > 0.0 {
            let probs = tape.softmax_rows(logits, None);
            let cp = tape.group_sum_cols(probs, &self.map.cluster_of, self.map.n_clusters);
            let reg = tape.nll(cp, &clusters);
            let reg = tape.scale(reg, self.config.lambda);
            loss = tape.add(loss, reg);
        }
        Ok((loss, stats.expect("training mode returns batch statistics")))
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(CLASSIFIER_ARCHITECTURE, serde_json::to_value(&self.config).expect("config serializes"));
        h.extra = json!({
            "clusters": self.map,
            "seed": self.seed,
            "stack": self.stack.as_ref().map(|s| &s.spec),
        });
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.header(), &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        Ok(checkpoint::save(path, &self.header(), &self.store)?)
    }

    pub fn from_checkpoint(header: &CheckpointHeader, loaded: &ParamStore) -> Result<Self, ModelError> {
        checkpoint::check_compatible(header, CLASSIFIER_ARCHITECTURE, None, None)?;
        let bad = |e: serde_json::Error| ModelError::InvalidConfig(e.to_string());
        let config: ClassifierConfig = serde_json::from_value(header.config.clone()).map_err(bad)?;
        let map: ClusterMap = serde_json::from_value(header.extra["clusters"].clone()).map_err(bad)?;
        let seed = header.extra["seed"].as_u64().unwrap_or(0);
        let mut m = Self::new(config, ClusterMap::new(map.cluster_of)?, seed)?;
        let spec: Option<StackSpec> = serde_json::from_value(header.extra["stack"].clone()).map_err(bad)?;
        if let Some(spec) = spec {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7c);
            m.stack = Some(EncoderStack::from_spec(&mut m.store, spec, &mut rng)?);
        }
        checkpoint::restore_into(&mut m.store, loaded)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (h, s) = checkpoint::load(path)?;
        Self::from_checkpoint(&h, &s)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (h, s) = checkpoint::from_bytes(bytes)?;
        Self::from_checkpoint(&h, &s)
    }
}

/// One row of the classification accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub ablation: Ablation,
    pub fraction: f64,
    pub lambda: f64,
    pub n_train: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub dev_template_acc: f64,
    pub dev_cluster_acc: f64,
    pub test_template_acc: f64,
    pub test_cluster_acc: f64,
}

pub fn accuracy_csv(rows: &[ClassifierReport]) -> String {
    let mut out = String::from("ablation,fraction,lambda,n_train,dev_template,dev_cluster,test_template,test_cluster\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.ablation.name(),
            r.fraction,
            r.lambda,
            r.n_train,
            r.dev_template_acc,
            r.dev_cluster_acc,
            r.test_template_acc,
            r.test_cluster_acc
        ));
    }
    out
}

/// Trains on a `fraction` of the training split (10:1:1), early-stopping on
/// dev template accuracy and restoring the best parameters.
pub fn train_classifier(
    samples: &[DownstreamSample],
    map: &ClusterMap,
    config: &ClassifierConfig,
    fraction: f64,
    opts: &DownstreamTrainOptions,
    encoders: Option<&Encoders>,
) -> Result<(QueryClassifier, ClassifierReport), ModelError> {
    check_fraction(fraction)?;
    let (sd, pd) = embedding_dims(samples)?;
    let config = ClassifierConfig {
        structure_dim: sd,
        perf_dim: pd,
        ..config.clone()
    };
    let mut model = match encoders {
        Some(enc) => QueryClassifier::with_encoders(config, map.clone(), enc, opts.seed)?,
        None => QueryClassifier::new(config, map.clone(), opts.seed)?,
    };
    for s in samples {
        model.label(s)?;
    }
    let splits = Splits::by_ratio(samples.len(), [10, 1, 1], opts.seed);
    let train = take_fraction(&splits.train, fraction, opts.seed);
    if train.len() < 2 {
        return Err(ModelError::EmptyDataset);
    }
    let dev: Vec<&DownstreamSample> = splits.dev.iter().map(|&i| &samples[i]).collect();
    let test: Vec<&DownstreamSample> = splits.test.iter().map(|&i| &samples[i]).collect();
    let monitor: Vec<&DownstreamSample> = if dev.is_empty() {
        train.iter().map(|&i| &samples[i]).collect()
    } else {
        dev.clone()
    };
    let mut opt = Adam::new(opts.lr);
    opt.clip_norm = opts.clip_norm;
    let mut stopper = EarlyStopping::new(opts.patience.max(1), 0.0);
    let mut best = model.store.clone();
    let mut epochs_run = 0;
    for epoch in 0..opts.epochs {
        let order = shuffled(train.len(), opts.seed, epoch);
        for chunk in order.chunks(opts.batch_size.max(2)) {
            // Batch statistics are undefined for a single row.
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&DownstreamSample> = chunk.iter().map(|&k| &samples[train[k]]).collect();
            let mut tape = Tape::new();
            let (loss, stats) = model.loss(&mut tape, &batch)?;
            let g = tape.backward(loss);
            let grads = tape.param_grads(&g, model.store.len());
            opt.step(&mut model.store, &grads);
            model.net.bn.update_running(&mut model.store, &stats);
        }
        epochs_run = epoch + 1;
        let (acc, _) = model.accuracy(&monitor)?;
        if stopper.update(epoch, 1.0 - acc) {
            best = model.store.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    restore_values(&mut model.store, &best);
    let (dev_t, dev_c) = model.accuracy(&dev)?;
    let (test_t, test_c) = model.accuracy(&test)?;
    let report = ClassifierReport {
        ablation: model.config.ablation,
        fraction,
        lambda: model.config.lambda,
        n_train: train.len(),
        epochs_run,
        best_epoch: stopper.best_epoch,
        dev_template_acc: dev_t,
        dev_cluster_acc: dev_c,
        test_template_acc: test_t,
        test_cluster_acc: test_c,
    };
    Ok((model, report))
}

/// Accuracy table over ablations and training fractions.
pub fn accuracy_table(
    samples: &[DownstreamSample],
    map: &ClusterMap,
    config: &ClassifierConfig,
    ablations: &[Ablation],
    fractions: &[f64],
    opts: &DownstreamTrainOptions,
) -> Result<Vec<ClassifierReport>, ModelError> {
    let mut out = Vec::new();
    for &ablation in ablations {
        for &fraction in fractions {
            let c = ClassifierConfig { ablation, ..config.clone() };
            out.push(train_classifier(samples, map, &c, fraction, opts, None)?.1);
        }
    }
    Ok(out)
}

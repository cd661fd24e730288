//! Computational performance encoders `C(p)`.
//!
//! One network per operator group (Scan, Join, Sort, Aggregate). Each takes
//! three inputs per node: plan features `f_node`, catalog features `f_meta`
//! and database settings `f_db`. Every input passes through its own column of
//! ReLU layers; the columns merge in a Tanh layer that feeds a linear
//! embedding layer, and three linear heads read the embedding to predict
//! Total Cost, Total Time and Startup Time.

use std::collections::HashMap;
use std::path::Path;

use qplan_core::catalog::{alias_map, node_references, Catalog, DbConfig, References, META_FEATURES, META_WIDTH, SETTINGS};
use qplan_core::datagen::Splits;
use qplan_core::plan::{extract_node_features, FeatureSchema};
use qplan_core::plan::{MetricLabels, OperatorGroup, PlanNode, PlanTree};
use qplan_nn::checkpoint::{self, sha256_hex, CheckpointHeader};
use qplan_nn::{Activation, Adam, Linear, Mlp, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::metrics::{mean, signed_log1p, std_dev, take_fraction, EarlyStopping, Standardizer};
use crate::structure::restore_values;
use crate::{check_fraction, ModelError};

pub const ARCHITECTURE: &str = "perf-encoder/1";
pub const EMBEDDING_DIM: usize = 300;
/// Label order of the three heads.
pub const LABEL_NAMES: [&str; 3] = ["total_cost", "total_time", "startup_time"];
/// Index of Total Time among the heads.
pub const TOTAL_TIME: usize = 1;

/// One training row: the three feature vectors of a node (or of a group's
/// cumulative row) and its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub f_node: Vec<f64>,
    pub f_meta: Vec<f64>,
    pub f_db: Vec<f64>,
    pub labels: MetricLabels,
    pub group: OperatorGroup,
    pub is_cumulative: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<String>,
}

/// References of a node and everything below it: the relations that feed it.
fn subtree_references(node: &PlanNode, aliases: &HashMap<String, String>, out: &mut References) {
    out.extend(&node_references(node, aliases));
    for c in &node.children {
        subtree_references(c, aliases, out);
    }
}

fn add_labels(acc: &mut [Option<f64>; 3], l: &MetricLabels, first: bool) {
    for (a, v) in acc.iter_mut().zip(l.as_array()) {
        *a = match (first, *a, v) {
            (true, _, v) => v,
            (false, Some(a), Some(v)) => Some(a + v),
            _ => None,
        };
    }
}

/// One row per node of each modeled group, then one cumulative row per
/// non-empty group whose `f_node` is the sum of that group's node vectors and
/// whose labels are the sums of the group's node labels.
///
/// `f_meta` covers the relations feeding the node; unknown relations
/// contribute nothing except the unknown-relation flag.
pub fn build_training_rows(
    tree: &PlanTree,
    catalog: &Catalog,
    config: &DbConfig,
    schema: &FeatureSchema,
) -> Result<Vec<FeatureBundle>, ModelError> {
    let aliases = alias_map(tree);
    let f_db = config.feature_vector();
    let nodes = tree.nodes();
    let mut rows = Vec::new();
    for group in OperatorGroup::MODELED {
        let mut sum = vec![0.0; schema.width];
        let mut all_refs = References::default();
        let mut labels = [None; 3];
        let mut count = 0;
        for node in nodes.iter().filter(|n| n.group() == group) {
            let f_node = extract_node_features(node, schema)?;
            let mut refs = References::default();
            subtree_references(node, &aliases, &mut refs);
            for (s, x) in sum.iter_mut().zip(&f_node) {
                *s += x;
            }
            add_labels(&mut labels, &node.labels, count == 0);
            all_refs.extend(&refs);
            count += 1;
            rows.push(FeatureBundle {
                f_node,
                f_meta: catalog.meta_features(&refs),
                f_db: f_db.clone(),
                labels: node.labels,
                group,
                is_cumulative: false,
                plan_id: tree.source_id.clone(),
            });
        }
        if count > 0 {
            rows.push(FeatureBundle {
                f_node: sum,
                f_meta: catalog.meta_features(&all_refs),
                f_db: f_db.clone(),
                labels: MetricLabels {
                    total_cost: labels[0],
                    total_time: labels[1],
                    startup_time: labels[2],
                },
                group,
                is_cumulative: true,
                plan_id: tree.source_id.clone(),
            });
        }
    }
    Ok(rows)
}

/// Hash of the three input schemas, stored in checkpoints.
pub fn schema_hash(schema: &FeatureSchema) -> String {
    let names: Vec<&str> = SETTINGS.iter().map(|(n, _, _)| *n).collect();
    let text = json!({ "node": schema, "meta": META_FEATURES, "db": names }).to_string();
    sha256_hex(text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfEncoderConfig {
    pub node_width: usize,
    pub meta_width: usize,
    pub db_width: usize,
    pub node_hidden: Vec<usize>,
    pub meta_hidden: Vec<usize>,
    pub db_hidden: Vec<usize>,
    pub merge_dim: usize,
    pub embedding_dim: usize,
    pub column_activation: Activation,
    pub merge_activation: Activation,
}

impl Default for PerfEncoderConfig {
    fn default() -> Self {
        Self {
            node_width: FeatureSchema::default().width,
            meta_width: META_WIDTH,
            db_width: SETTINGS.len(),
            node_hidden: vec![128, 128],
            meta_hidden: vec![32, 32],
            db_hidden: vec![32, 32],
            merge_dim: 256,
            embedding_dim: EMBEDDING_DIM,
            column_activation: Activation::Relu,
            merge_activation: Activation::Tanh,
        }
    }
}

impl PerfEncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let widths = [self.node_width, self.meta_width, self.db_width, self.merge_dim, self.embedding_dim];
        if widths.contains(&0) {
            return Err(ModelError::InvalidConfig("perf encoder widths must be positive".into()));
        }
        for h in [&self.node_hidden, &self.meta_hidden, &self.db_hidden] {
            if h.is_empty() || h.contains(&0) {
                return Err(ModelError::InvalidConfig("every column needs positive hidden sizes".into()));
            }
        }
        Ok(())
    }

    fn column_dims(&self) -> [Vec<usize>; 3] {
        let dims = |w: usize, h: &[usize]| std::iter::once(w).chain(h.iter().copied()).collect::<Vec<_>>();
        [
            dims(self.node_width, &self.node_hidden),
            dims(self.meta_width, &self.meta_hidden),
            dims(self.db_width, &self.db_hidden),
        ]
    }

    fn input_width(&self) -> usize {
        self.node_width + self.meta_width + self.db_width
    }
}

/// Column layout of a group network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// One column each for `f_node`, `f_meta`, `f_db`.
    MultiColumn,
    /// One column over the concatenated inputs, two hidden layers of `hidden`.
    SingleColumn { hidden: usize },
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::MultiColumn => "multi-column",
            Architecture::SingleColumn { .. } => "single-column",
        }
    }
}

fn linear_params(i: usize, o: usize) -> usize {
    i * o + o
}

fn mlp_params(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| linear_params(w[0], w[1])).sum()
}

/// Parameter count of a group network (merge, embedding and heads included).
pub fn param_count(config: &PerfEncoderConfig, arch: Architecture) -> usize {
    let tail = linear_params(config.merge_dim, config.embedding_dim) + 3 * linear_params(config.embedding_dim, 1);
    let front = match arch {
        Architecture::MultiColumn => {
            let cols = config.column_dims();
            let merged: usize = cols.iter().map(|d| *d.last().expect("non-empty")).sum();
            cols.iter().map(|d| mlp_params(d)).sum::<usize>() + linear_params(merged, config.merge_dim)
        }
        Architecture::SingleColumn { hidden } => {
            mlp_params(&[config.input_width(), hidden, hidden]) + linear_params(hidden, config.merge_dim)
        }
    };
    front + tail
}

/// Single-column hidden width whose parameter count is closest to the
/// multi-column network's.
pub fn matched_single_column(config: &PerfEncoderConfig) -> Architecture {
    let target = param_count(config, Architecture::MultiColumn) as i64;
    let hidden = (1..=4096)
        .min_by_key(|&h| (param_count(config, Architecture::SingleColumn { hidden: h }) as i64 - target).abs())
        .expect("non-empty range");
    Architecture::SingleColumn { hidden }
}

/// Parameter handles of one group network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfNet {
    pub arch: Architecture,
    pub columns: Vec<Mlp>,
    pub merge: Linear,
    pub embed: Linear,
    pub heads: [Linear; 3],
    pub merge_activation: Activation,
}

impl PerfNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &PerfEncoderConfig,
        arch: Architecture,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let columns = match arch {
            Architecture::MultiColumn => ["node", "meta", "db"]
                .iter()
                .zip(config.column_dims())
                .map(|(name, dims)| Mlp::new(store, &format!("{prefix}.{name}"), &dims, config.column_activation, true, rng))
                .collect(),
            Architecture::SingleColumn { hidden } => {
                if hidden == 0 {
                    return Err(ModelError::InvalidConfig("single-column width must be positive".into()));
                }
                let dims = [config.input_width(), hidden, hidden];
                vec![Mlp::new(store, &format!("{prefix}.all"), &dims, config.column_activation, true, rng)]
            }
        };
        let merged: usize = columns.iter().map(Mlp::out_dim).sum();
        let merge = Linear::new(store, &format!("{prefix}.merge"), merged, config.merge_dim, true, rng);
        let embed = Linear::new(store, &format!("{prefix}.embed"), config.merge_dim, config.embedding_dim, true, rng);
        let heads = [0, 1, 2].map(|i| Linear::new(store, &format!("{prefix}.head.{}", LABEL_NAMES[i]), config.embedding_dim, 1, true, rng));
        Ok(Self {
            arch,
            columns,
            merge,
            embed,
            heads,
            merge_activation: config.merge_activation,
        })
    }

    /// Shared trunk: columns, merge layer and embedding layer (`B × embedding_dim`).
    pub fn embedding(&self, tape: &mut Tape, store: &ParamStore, node: Var, meta: Var, db: Var) -> Var {
        let outs: Vec<Var> = match self.arch {
            Architecture::MultiColumn => self
                .columns
                .iter()
                .zip([node, meta, db])
                .map(|(c, x)| c.forward(tape, store, x))
                .collect(),
            Architecture::SingleColumn { .. } => {
                let x = tape.concat_cols(&[node, meta, db]);
                vec![self.columns[0].forward(tape, store, x)]
            }
        };
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let h = self.merge.forward(tape, store, cat);
        let h = self.merge_activation.apply(tape, h);
        self.embed.forward(tape, store, h)
    }

    /// Head outputs from an embedding, as `B × 3`.
    pub fn heads(&self, tape: &mut Tape, store: &ParamStore, emb: Var) -> Var {
        let outs: Vec<Var> = self.heads.iter().map(|h| h.forward(tape, store, emb)).collect();
        tape.concat_cols(&outs)
    }
}

/// Input and label transforms fitted on training rows: inputs are
/// `signed_log1p` then standardized, labels are `log1p` then standardized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfNormalizer {
    pub node: Standardizer,
    pub meta: Standardizer,
    pub db: Standardizer,
    pub labels: Standardizer,
}

fn logged(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| signed_log1p(*x)).collect()
}

impl PerfNormalizer {
    pub fn identity(config: &PerfEncoderConfig) -> Self {
        Self {
            node: Standardizer::identity(config.node_width),
            meta: Standardizer::identity(config.meta_width),
            db: Standardizer::identity(config.db_width),
            labels: Standardizer::identity(3),
        }
    }

    pub fn fit(rows: &[&FeatureBundle], config: &PerfEncoderConfig) -> Self {
        let col = |f: &dyn Fn(&FeatureBundle) -> &Vec<f64>| rows.iter().map(|r| logged(f(r))).collect::<Vec<_>>();
        let mut label_cols: [Vec<f64>; 3] = Default::default();
        for r in rows {
            for (c, v) in label_cols.iter_mut().zip(r.labels.as_array()) {
                if let Some(v) = v {
                    c.push(v.max(0.0).ln_1p());
                }
            }
        }
        let labels = Standardizer {
            mean: label_cols.iter().map(|c| mean(c)).collect(),
            std: label_cols.iter().map(|c| if std_dev(c) > 1e-9 { std_dev(c) } else { 1.0 }).collect(),
        };
        Self {
            node: Standardizer::fit(&col(&|r| &r.f_node), config.node_width),
            meta: Standardizer::fit(&col(&|r| &r.f_meta), config.meta_width),
            db: Standardizer::fit(&col(&|r| &r.f_db), config.db_width),
            labels,
        }
    }

    /// Transformed `(node, meta, db)` input matrices.
    pub fn inputs(&self, rows: &[&FeatureBundle]) -> (Tensor, Tensor, Tensor) {
        let mat = |s: &Standardizer, f: &dyn Fn(&FeatureBundle) -> &Vec<f64>| {
            let data: Vec<f64> = rows.iter().flat_map(|r| s.apply(&logged(f(r)))).collect();
            Tensor::new(rows.len(), s.width(), data).expect("widths checked")
        };
        (
            mat(&self.node, &|r| &r.f_node),
            mat(&self.meta, &|r| &r.f_meta),
            mat(&self.db, &|r| &r.f_db),
        )
    }

    /// Standardized targets and the mask of present labels, both `B × 3`.
    pub fn targets(&self, rows: &[&FeatureBundle]) -> (Tensor, Tensor) {
        let mut t = Tensor::zeros(rows.len(), 3);
        let mut m = Tensor::zeros(rows.len(), 3);
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.labels.as_array().iter().enumerate() {
                if let Some(v) = v {
                    t.set(i, j, (v.max(0.0).ln_1p() - self.labels.mean[j]) / self.labels.std[j]);
                    m.set(i, j, 1.0);
                }
            }
        }
        (t, m)
    }

    /// Head outputs back in label units.
    pub fn decode(&self, z: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (z[j] * self.labels.std[j] + self.labels.mean[j]).exp_m1().max(0.0);
        }
        out
    }
}

/// Parameter-name prefix of a standalone group model.
pub const PERF_PREFIX: &str = "perf";

/// A trained (or fresh) group network with its normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfModel {
    pub group: OperatorGroup,
    pub config: PerfEncoderConfig,
    pub store: ParamStore,
    pub net: PerfNet,
    pub norm: PerfNormalizer,
    pub schema_hash: String,
    pub seed: u64,
}

impl PerfModel {
    pub fn new(
        group: OperatorGroup,
        config: PerfEncoderConfig,
        arch: Architecture,
        schema: &FeatureSchema,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if !OperatorGroup::MODELED.contains(&group) {
            return Err(ModelError::InvalidConfig(format!("group {} has no performance model", group.name())));
        }
        if schema.width != config.node_width {
            return Err(ModelError::SchemaMismatch(format!(
                "feature schema width {} but model expects {}",
                schema.width, config.node_width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = PerfNet::new(&mut store, PERF_PREFIX, &config, arch, &mut rng)?;
        Ok(Self {
            group,
            norm: PerfNormalizer::identity(&config),
            config,
            store,
            net,
            schema_hash: schema_hash(schema),
            seed,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.net.arch
    }

    fn check_rows(&self, rows: &[&FeatureBundle]) -> Result<(), ModelError> {
        for r in rows {
            if r.group != self.group {
                return Err(ModelError::SchemaMismatch(format!(
                    "{} row given to the {} model",
                    r.group.name(),
                    self.group.name()
                )));
            }
            for (what, got, want) in [
                ("f_node", r.f_node.len(), self.config.node_width),
                ("f_meta", r.f_meta.len(), self.config.meta_width),
                ("f_db", r.f_db.len(), self.config.db_width),
            ] {
                if got != want {
                    return Err(ModelError::SchemaMismatch(format!("{what} has {got} slots, expected {want}")));
                }
            }
        }
        Ok(())
    }

    /// Embeddings and raw head outputs (standardized log space) of a batch.
    pub fn forward_raw(&self, rows: &[&FeatureBundle]) -> Result<(Tensor, Tensor), ModelError> {
        self.check_rows(rows)?;
        let (n, m, d) = self.norm.inputs(rows);
        let mut tape = Tape::new();
        let (n, m, d) = (tape.constant(n), tape.constant(m), tape.constant(d));
        let emb = self.net.embedding(&mut tape, &self.store, n, m, d);
        let out = self.net.heads(&mut tape, &self.store, emb);
        Ok((tape.value(emb).clone(), tape.value(out).clone()))
    }

    /// Embedding and label predictions (original units) for one row.
    pub fn perf_forward(&self, bundle: &FeatureBundle) -> Result<(Vec<f64>, [f64; 3]), ModelError> {
        let (emb, out) = self.forward_raw(&[bundle])?;
        Ok((emb.data().to_vec(), self.norm.decode(out.row(0))))
    }

    pub fn predict(&self, rows: &[&FeatureBundle]) -> Result<Vec<[f64; 3]>, ModelError> {
        let (_, out) = self.forward_raw(rows)?;
        Ok((0..rows.len()).map(|i| self.norm.decode(out.row(i))).collect())
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(ARCHITECTURE, serde_json::to_value(&self.config).expect("config serializes"));
        h.schema_hash = Some(self.schema_hash.clone());
        h.extra = json!({
            "group": self.group,
            "arch": self.net.arch,
            "norm": self.norm,
            "seed": self.seed,
        });
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.header(), &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        Ok(checkpoint::save(path, &self.header(), &self.store)?)
    }

    /// Rebuilds a model from a checkpoint, checking the feature schema.
    pub fn from_checkpoint(header: &CheckpointHeader, loaded: &ParamStore, schema: &FeatureSchema) -> Result<Self, ModelError> {
        checkpoint::check_compatible(header, ARCHITECTURE, None, Some(&schema_hash(schema)))?;
        let bad = |e: serde_json::Error| ModelError::InvalidConfig(e.to_string());
        let config: PerfEncoderConfig = serde_json::from_value(header.config.clone()).map_err(bad)?;
        let group: OperatorGroup = serde_json::from_value(header.extra["group"].clone()).map_err(bad)?;
        let arch: Architecture = serde_json::from_value(header.extra["arch"].clone()).map_err(bad)?;
        let norm: PerfNormalizer = serde_json::from_value(header.extra["norm"].clone()).map_err(bad)?;
        let seed = header.extra["seed"].as_u64().unwrap_or(0);
        let mut model = Self::new(group, config, arch, schema, seed)?;
        model.norm = norm;
        checkpoint::restore_into(&mut model.store, loaded)?;
        Ok(model)
    }

    pub fn load(path: &Path, schema: &FeatureSchema) -> Result<Self, ModelError> {
        let (header, store) = checkpoint::load(path)?;
        Self::from_checkpoint(&header, &store, schema)
    }

    pub fn from_bytes(bytes: &[u8], schema: &FeatureSchema) -> Result<Self, ModelError> {
        let (header, store) = checkpoint::from_bytes(bytes)?;
        Self::from_checkpoint(&header, &store, schema)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfTrainOptions {
    pub max_epochs: usize,
    /// Epochs without a validation gain larger than `min_delta` before stopping.
    pub patience: usize,
    /// In label units (milliseconds for Total Time).
    pub min_delta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for PerfTrainOptions {
    fn default() -> Self {
        Self {
            max_epochs: 1000,
            patience: 100,
            min_delta: 5.0,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub group: OperatorGroup,
    pub arch: String,
    pub param_count: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Validation Total Time MAE per epoch.
    pub val_curve: Vec<f64>,
    /// Best validation MAE so far, per epoch.
    pub best_so_far: Vec<f64>,
    /// Test MAE per label at the best-validation epoch, original units.
    pub test_mae: [f64; 3],
    /// Standard deviation of each test label.
    pub test_label_std: [f64; 3],
}

/// Per-label MAE and label standard deviation over `rows`, original units.
pub fn evaluate_rows(model: &PerfModel, rows: &[&FeatureBundle]) -> Result<([f64; 3], [f64; 3]), ModelError> {
    let mut maes = [0.0; 3];
    let mut stds = [0.0; 3];
    if rows.is_empty() {
        return Ok(([f64::NAN; 3], [f64::NAN; 3]));
    }
    let preds = model.predict(rows)?;
    for j in 0..3 {
        let pairs: Vec<(f64, f64)> = rows
            .iter()
            .zip(&preds)
            .filter_map(|(r, p)| r.labels.as_array()[j].map(|t| (p[j], t)))
            .collect();
        let truth: Vec<f64> = pairs.iter().map(|x| x.1).collect();
        maes[j] = mean(&pairs.iter().map(|(p, t)| (p - t).abs()).collect::<Vec<_>>());
        stds[j] = std_dev(&truth);
    }
    Ok((maes, stds))
}

/// Trains on `train`, monitors Total Time MAE on `val` (or `train` when
/// `val` is empty), and reports test errors at the best-validation epoch.
/// The normalizer is refitted on `train` when `fit_norm` is set.
pub fn train_group(
    model: &mut PerfModel,
    train: &[&FeatureBundle],
    val: &[&FeatureBundle],
    test: &[&FeatureBundle],
    opts: &PerfTrainOptions,
    fit_norm: bool,
) -> Result<PerfReport, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyGroup(model.group.name().into()));
    }
    model.check_rows(train)?;
    model.check_rows(val)?;
    model.check_rows(test)?;
    if fit_norm {
        model.norm = PerfNormalizer::fit(train, &model.config);
    }
    let monitor = if val.is_empty() { train } else { val };
    let (inputs, targets) = {
        let (n, m, d) = model.norm.inputs(train);
        ((n, m, d), model.norm.targets(train))
    };
    let mut opt = Adam::new(opts.lr);
    opt.clip_norm = opts.clip_norm;
    let mut stopper = EarlyStopping::new(opts.patience.max(1), opts.min_delta);
    let mut best = model.store.clone();
    let mut val_curve = Vec::new();
    let mut best_so_far = Vec::new();
    let bs = opts.batch_size.max(1);
    let mut epochs_run = 0;
    for epoch in 0..opts.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        for chunk in order.chunks(bs) {
            let pick = |t: &Tensor| {
                let data: Vec<f64> = chunk.iter().flat_map(|&i| t.row(i).to_vec()).collect();
                Tensor::new(chunk.len(), t.cols(), data).expect("row widths agree")
            };
            let mut tape = Tape::new();
            let n = tape.constant(pick(&inputs.0));
            let m = tape.constant(pick(&inputs.1));
            let d = tape.constant(pick(&inputs.2));
            let emb = model.net.embedding(&mut tape, &model.store, n, m, d);
            let out = model.net.heads(&mut tape, &model.store, emb);
            let loss = tape.mse(out, &pick(&targets.0), Some(&pick(&targets.1)));
            let g = tape.backward(loss);
            let grads = tape.param_grads(&g, model.store.len());
            opt.step(&mut model.store, &grads);
        }
        let (maes, _) = evaluate_rows(model, monitor)?;
        let v = maes[TOTAL_TIME];
        if stopper.update(epoch, v) {
            best = model.store.clone();
        }
        val_curve.push(v);
        best_so_far.push(stopper.best);
        epochs_run = epoch + 1;
        if stopper.should_stop() {
            break;
        }
    }
    restore_values(&mut model.store, &best);
    let (test_mae, test_label_std) = evaluate_rows(model, test)?;
    Ok(PerfReport {
        group: model.group,
        arch: model.arch().name().into(),
        param_count: model.param_count(),
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        epochs_run,
        best_epoch: stopper.best_epoch,
        val_curve,
        best_so_far,
        test_mae,
        test_label_std,
    })
}

/// Rows of `group`, split 8:1:1 with `seed`.
pub fn split_group<'a>(
    rows: &'a [FeatureBundle],
    group: OperatorGroup,
    seed: u64,
) -> (Vec<&'a FeatureBundle>, Vec<&'a FeatureBundle>, Vec<&'a FeatureBundle>) {
    let mine: Vec<&FeatureBundle> = rows.iter().filter(|r| r.group == group).collect();
    let s = Splits::by_ratio(mine.len(), [8, 1, 1], seed);
    let take = |idx: &[usize]| idx.iter().map(|&i| mine[i]).collect::<Vec<_>>();
    (take(&s.train), take(&s.dev), take(&s.test))
}

/// Trains one group model on its rows with the 8:1:1 split.
pub fn joint_train(
    rows: &[FeatureBundle],
    group: OperatorGroup,
    config: &PerfEncoderConfig,
    arch: Architecture,
    schema: &FeatureSchema,
    opts: &PerfTrainOptions,
) -> Result<(PerfModel, PerfReport), ModelError> {
    let (train, val, test) = split_group(rows, group, opts.seed);
    if train.is_empty() {
        return Err(ModelError::EmptyGroup(group.name().into()));
    }
    let mut model = PerfModel::new(group, config.clone(), arch, schema, opts.seed ^ group as u64)?;
    let report = train_group(&mut model, &train, &val, &test, opts, true)?;
    Ok((model, report))
}

/// The four group models used to build `C(p)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerfEncoderSet {
    pub models: Vec<PerfModel>,
}

impl PerfEncoderSet {
    pub fn get(&self, group: OperatorGroup) -> Option<&PerfModel> {
        self.models.iter().find(|m| m.group == group)
    }

    pub fn embedding_dim(&self) -> usize {
        self.models.first().map_or(EMBEDDING_DIM, |m| m.config.embedding_dim)
    }

    /// Width of `C(p)`: four embeddings.
    pub fn width(&self) -> usize {
        4 * self.embedding_dim()
    }

    /// Fails unless all four groups are present with one embedding width.
    pub fn check_complete(&self) -> Result<(), ModelError> {
        for g in OperatorGroup::MODELED {
            let m = self.get(g).ok_or_else(|| ModelError::MissingCheckpoint(format!("{} performance model", g.name())))?;
            if m.config.embedding_dim != self.embedding_dim() {
                return Err(ModelError::InvalidConfig("group models disagree on embedding width".into()));
            }
        }
        Ok(())
    }

    /// Writes `<dir>/<group>.qpck` per model and returns `(file, sha256)` pairs.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<(String, String)>, ModelError> {
        std::fs::create_dir_all(dir).map_err(qplan_nn::checkpoint::CheckpointError::from)?;
        let mut out = Vec::new();
        for m in &self.models {
            let name = format!("{}.qpck", m.group.name().to_lowercase());
            out.push((name.clone(), m.save(&dir.join(&name))?));
        }
        Ok(out)
    }

    pub fn load_dir(dir: &Path, schema: &FeatureSchema) -> Result<Self, ModelError> {
        let mut models = Vec::new();
        for g in OperatorGroup::MODELED {
            let path = dir.join(format!("{}.qpck", g.name().to_lowercase()));
            if !path.exists() {
                return Err(ModelError::MissingCheckpoint(path.display().to_string()));
            }
            models.push(PerfModel::load(&path, schema)?);
        }
        let set = Self { models };
        set.check_complete()?;
        Ok(set)
    }
}

/// Trains all four group models; groups without rows are skipped with a warning.
pub fn train_all(
    rows: &[FeatureBundle],
    config: &PerfEncoderConfig,
    arch: Architecture,
    schema: &FeatureSchema,
    opts: &PerfTrainOptions,
) -> Result<(PerfEncoderSet, Vec<PerfReport>), ModelError> {
    let mut set = PerfEncoderSet::default();
    let mut reports = Vec::new();
    for g in OperatorGroup::MODELED {
        match joint_train(rows, g, config, arch, schema, opts) {
            Ok((m, r)) => {
                set.models.push(m);
                reports.push(r);
            }
            Err(ModelError::EmptyGroup(name)) => log::warn!("no rows for group {name}; skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok((set, reports))
}

/// `C(p)`: the cumulative-row embedding of each group in Scan|Join|Sort|Aggregate
/// order, zeros for groups absent from the plan.
pub fn perf_embed_plan(
    tree: &PlanTree,
    catalog: &Catalog,
    config: &DbConfig,
    schema: &FeatureSchema,
    set: &PerfEncoderSet,
) -> Result<Vec<f64>, ModelError> {
    set.check_complete()?;
    let rows = build_training_rows(tree, catalog, config, schema)?;
    perf_embed_rows(&rows, set)
}

/// `C(p)` from prebuilt rows.
pub fn perf_embed_rows(rows: &[FeatureBundle], set: &PerfEncoderSet) -> Result<Vec<f64>, ModelError> {
    set.check_complete()?;
    let d = set.embedding_dim();
    let mut out = Vec::with_capacity(4 * d);
    for g in OperatorGroup::MODELED {
        match rows.iter().find(|r| r.group == g && r.is_cumulative) {
            Some(r) => {
                let model = set.get(g).expect("checked complete");
                out.extend(model.perf_forward(r)?.0);
            }
            None => out.extend(std::iter::repeat(0.0).take(d)),
        }
    }
    Ok(out)
}

/// One row of the multi- vs single-column comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub group: OperatorGroup,
    pub arch: String,
    pub param_count: usize,
    pub test_mae: [f64; 3],
}

/// Trains both architectures per group at a matched parameter budget.
pub fn compare_architectures(
    rows: &[FeatureBundle],
    config: &PerfEncoderConfig,
    schema: &FeatureSchema,
    opts: &PerfTrainOptions,
) -> Result<Vec<ComparisonRow>, ModelError> {
    let single = matched_single_column(config);
    let mut out = Vec::new();
    for g in OperatorGroup::MODELED {
        for arch in [Architecture::MultiColumn, single] {
            match joint_train(rows, g, config, arch, schema, opts) {
                Ok((_, r)) => out.push(ComparisonRow {
                    group: g,
                    arch: r.arch.clone(),
                    param_count: r.param_count,
                    test_mae: r.test_mae,
                }),
                Err(ModelError::EmptyGroup(name)) => log::warn!("no rows for group {name}; skipped"),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("group,arch,params,mae_total_cost,mae_total_time,mae_startup_time\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.group.name(),
            r.arch,
            r.param_count,
            r.test_mae[0],
            r.test_mae[1],
            r.test_mae[2]
        ));
    }
    out
}

/// One row of the pretrained-vs-scratch table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfFinetuneRow {
    pub group: OperatorGroup,
    pub fraction: f64,
    /// `pretrained` or `scratch`.
    pub variant: String,
    pub val_mae: f64,
    /// Test MAE per label at the best-validation epoch.
    pub test_mae: [f64; 3],
}

pub fn finetune_csv(rows: &[PerfFinetuneRow]) -> String {
    let mut out = String::from("group,fraction,variant,val_mae_total_time,mae_total_cost,mae_total_time,mae_startup_time\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.group.name(),
            r.fraction,
            r.variant,
            r.val_mae,
            r.test_mae[0],
            r.test_mae[1],
            r.test_mae[2]
        ));
    }
    out
}

fn best_val(report: &PerfReport) -> f64 {
    report.best_so_far.last().copied().unwrap_or(f64::NAN)
}

/// Continues training a pretrained group model on a fraction of new-domain
/// rows, keeping the pretrained normalizer.
pub fn finetune_perf(
    pretrained: &PerfModel,
    rows: &[FeatureBundle],
    fraction: f64,
    opts: &PerfTrainOptions,
) -> Result<(PerfModel, PerfReport), ModelError> {
    check_fraction(fraction)?;
    let (train, val, test) = split_group(rows, pretrained.group, opts.seed);
    let subset = take_fraction(&train, fraction, opts.seed);
    let mut model = pretrained.clone();
    let report = train_group(&mut model, &subset, &val, &test, opts, false)?;
    Ok((model, report))
}

/// Pretrained-vs-scratch runs for every group model and fraction.
pub fn finetune_table(
    set: &PerfEncoderSet,
    rows: &[FeatureBundle],
    fractions: &[f64],
    schema: &FeatureSchema,
    opts: &PerfTrainOptions,
) -> Result<Vec<PerfFinetuneRow>, ModelError> {
    let mut out = Vec::new();
    for model in &set.models {
        for &fraction in fractions {
            let (_, r) = finetune_perf(model, rows, fraction, opts)?;
            out.push(PerfFinetuneRow {
                group: model.group,
                fraction,
                variant: "pretrained".into(),
                val_mae: best_val(&r),
                test_mae: r.test_mae,
            });
            let (train, val, test) = split_group(rows, model.group, opts.seed);
            let subset = take_fraction(&train, fraction, opts.seed);
            let mut scratch = PerfModel::new(model.group, model.config.clone(), model.arch(), schema, model.seed ^ 0x5c)?;
            let r = train_group(&mut scratch, &subset, &val, &test, opts, true)?;
            out.push(PerfFinetuneRow {
                group: model.group,
                fraction,
                variant: "scratch".into(),
                val_mae: best_val(&r),
                test_mae: r.test_mae,
            });
        }
    }
    Ok(out)
}

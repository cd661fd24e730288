//! The plan structure encoder `S(p)` and its plan-pair matching head.
//!
//! A plan is linearized, wrapped in `CLS`/`SEP`, mapped to per-level ids and
//! embedded as the concatenation of three subtype embeddings plus a learned
//! position embedding. Stacked self-attention blocks follow; the output at the
//! `CLS` position is the plan vector. Pretraining regresses the Smatch score of
//! plan pairs through `σ(W·[vi; vj; vi−vj; vi⊙vj] + b)`.

use std::collections::HashMap;
use std::path::Path;

use qplan_core::datagen::{ScoredPair, MAX_PLAN_NODES};
use qplan_core::linearize::{encode_ids, linearize_with_cap, EncodedIds, LinearizeError, Vocabulary};
use qplan_core::plan::PlanTree;
use qplan_nn::checkpoint::{self, sha256_hex, CheckpointHeader};
use qplan_nn::tape::sigmoid;
use qplan_nn::{xavier_uniform, Adam, Embedding, ParamId, ParamStore, Tape, Tensor, TransformerBlock, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::metrics::{mean, take_fraction, EarlyStopping, EpochMetrics};
use crate::{check_fraction, ModelError};

pub const ARCHITECTURE: &str = "structure-encoder/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureEncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_sequence_length: usize,
    /// Dropout rate on the input embeddings during training.
    pub dropout: f64,
    /// Widths of the level-1/2/3 subtype embeddings; they sum to `d_model`.
    pub level_dims: [usize; 3],
}

impl Default for StructureEncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            layers: 2,
            d_ff: 256,
            max_sequence_length: 512,
            dropout: 0.0,
            level_dims: [64, 32, 32],
        }
    }
}

impl StructureEncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.level_dims.iter().sum::<usize>() != self.d_model {
            return bad(format!("level dims {:?} do not sum to d_model {}", self.level_dims, self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.max_sequence_length < 3 {
            return bad("max_sequence_length must allow CLS, one node and SEP".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        Ok(())
    }
}

/// Plan vector `P_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEmbedding {
    pub vector: Vec<f64>,
    pub source_id: Option<String>,
}

/// Parameter handles of the encoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureEncoder {
    pub tables: [Embedding; 3],
    pub positions: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub d_model: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl StructureEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &StructureEncoderConfig,
        vocab_sizes: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let tables = [0, 1, 2].map(|l| {
            Embedding::new(store, &format!("{prefix}.level{}", l + 1), vocab_sizes[l], config.level_dims[l], rng)
        });
        let positions = Embedding::new(store, &format!("{prefix}.positions"), config.max_sequence_length, config.d_model, rng);
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), config.d_model, config.heads, config.d_ff, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            tables,
            positions,
            blocks,
            d_model: config.d_model,
            max_len: config.max_sequence_length,
            dropout: config.dropout,
        })
    }

    /// Per position: `[level1; level2; level3]` embeddings plus the position embedding.
    pub fn embed_inputs(&self, tape: &mut Tape, store: &ParamStore, ids: &EncodedIds) -> Result<Var, ModelError> {
        let n = ids.len();
        if n > self.max_len {
            return Err(LinearizeError::SequenceTooLong { len: n, cap: self.max_len }.into());
        }
        let mut parts = Vec::with_capacity(3);
        for (level, (table, list)) in self.tables.iter().zip(ids.levels()).enumerate() {
            if let Some(&id) = list.iter().find(|&&id| id as usize >= table.vocab) {
                return Err(ModelError::UnknownId {
                    level: level + 1,
                    id,
                    size: table.vocab,
                });
            }
            let idx: Vec<usize> = list.iter().map(|&i| i as usize).collect();
            parts.push(table.forward(tape, store, &idx));
        }
        let x = tape.concat_cols(&parts);
        let pos: Vec<usize> = (0..n).collect();
        let p = self.positions.forward(tape, store, &pos);
        Ok(tape.add(x, p))
    }

    /// The `1 × d_model` output at the CLS position. Dropout is applied to
    /// the inputs only when `rng` is given.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &EncodedIds,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let mut x = self.embed_inputs(tape, store, ids)?;
        if let Some(rng) = rng {
            if self.dropout > 0.0 {
                x = tape.dropout(x, self.dropout, rng);
            }
        }
        for b in &self.blocks {
            x = b.forward(tape, store, x, None);
        }
        Ok(tape.slice_rows(x, 0, 1))
    }
}

/// `σ(W·[vi; vj; vi−vj; vi⊙vj] + b)` with `W ∈ R^{4d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingHead {
    pub w: ParamId,
    pub b: ParamId,
    pub d: usize,
}

impl MatchingHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add(&format!("{prefix}.w"), xavier_uniform(4 * d, 1, rng), true),
            b: store.add(&format!("{prefix}.b"), Tensor::zeros(1, 1), true),
            d,
        }
    }

    /// Row-wise similarity of `vi` and `vj` (both `B × d`), returned as `B × 1`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, vi: Var, vj: Var) -> Var {
        let diff = tape.sub(vi, vj);
        let prod = tape.mul(vi, vj);
        let feats = tape.concat_cols(&[vi, vj, diff, prod]);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let logit = tape.matmul(feats, w);
        let logit = tape.add_row(logit, b);
        tape.sigmoid(logit)
    }
}

/// Matching-layer features `[vi; vj; vi−vj; vi⊙vj]`.
pub fn match_features(vi: &[f64], vj: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(4 * vi.len());
    f.extend_from_slice(vi);
    f.extend_from_slice(vj);
    f.extend(vi.iter().zip(vj).map(|(a, b)| a - b));
    f.extend(vi.iter().zip(vj).map(|(a, b)| a * b));
    f
}

/// Similarity of two plan vectors under head weights `w` (length `4d`) and bias `b`.
pub fn match_pair(vi: &[f64], vj: &[f64], w: &[f64], b: f64) -> Result<f64, ModelError> {
    if vj.len() != vi.len() {
        return Err(ModelError::ShapeMismatch {
            what: "match_pair second vector".into(),
            expected: vi.len(),
            found: vj.len(),
        });
    }
    if w.len() != 4 * vi.len() {
        return Err(ModelError::ShapeMismatch {
            what: "match_pair weights".into(),
            expected: 4 * vi.len(),
            found: w.len(),
        });
    }
    let z: f64 = match_features(vi, vj).iter().zip(w).map(|(f, w)| f * w).sum::<f64>() + b;
    Ok(sigmoid(z))
}

/// Encoder, matching head, vocabulary and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureModel {
    pub config: StructureEncoderConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: StructureEncoder,
    pub head: MatchingHead,
    pub seed: u64,
}

/// Parameter-name prefix of the encoder stack.
pub const ENCODER_PREFIX: &str = "enc";
/// Parameter-name prefix of the matching head.
pub const HEAD_PREFIX: &str = "head";

impl StructureModel {
    /// Fresh model with Xavier-uniform weights drawn from `seed`.
    pub fn new(config: StructureEncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = StructureEncoder::new(&mut store, ENCODER_PREFIX, &config, vocab.sizes(), &mut rng)?;
        let head = MatchingHead::new(&mut store, HEAD_PREFIX, config.d_model, &mut rng);
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            head,
            seed,
        })
    }

    /// Linearizes a plan within the configured cap and maps it to ids.
    pub fn ids(&self, tree: &PlanTree) -> Result<EncodedIds, ModelError> {
        let seq = linearize_with_cap(tree, self.config.max_sequence_length)?.with_specials();
        Ok(encode_ids(&seq, &self.vocab))
    }

    pub fn embed_ids(&self, ids: &EncodedIds) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let v = self.encoder.encode(&mut tape, &self.store, ids, None)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn encode_plan(&self, tree: &PlanTree) -> Result<PlanEmbedding, ModelError> {
        Ok(PlanEmbedding {
            vector: self.embed_ids(&self.ids(tree)?)?,
            source_id: tree.source_id.clone(),
        })
    }

    /// Head weights `(W, b)`.
    pub fn head_weights(&self) -> (Vec<f64>, f64) {
        (self.store.value(self.head.w).data().to_vec(), self.store.value(self.head.b).item())
    }

    /// Predicted similarity of two plans.
    pub fn similarity(&self, a: &PlanTree, b: &PlanTree) -> Result<f64, ModelError> {
        let (w, bias) = self.head_weights();
        match_pair(&self.encode_plan(a)?.vector, &self.encode_plan(b)?.vector, &w, bias)
    }

    /// Freezes or unfreezes every encoder parameter; the head stays trainable.
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        self.store.set_trainable_prefix(&format!("{ENCODER_PREFIX}."), trainable);
    }

    pub fn vocab_hash(&self) -> String {
        sha256_hex(self.vocab.to_json().as_bytes())
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(ARCHITECTURE, serde_json::to_value(&self.config).expect("config serializes"));
        h.vocab_hash = Some(self.vocab_hash());
        h.extra = json!({ "vocab": self.vocab.to_json(), "seed": self.seed });
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.header(), &self.store)
    }

    /// Writes a checkpoint and returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        Ok(checkpoint::save(path, &self.header(), &self.store)?)
    }

    pub fn from_checkpoint(header: &CheckpointHeader, loaded: &ParamStore) -> Result<Self, ModelError> {
        checkpoint::check_compatible(header, ARCHITECTURE, None, None)?;
        let config: StructureEncoderConfig =
            serde_json::from_value(header.config.clone()).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let vocab_text = header.extra["vocab"]
            .as_str()
            .ok_or_else(|| ModelError::InvalidConfig("checkpoint lacks a vocabulary".into()))?;
        let vocab = Vocabulary::from_json(vocab_text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let seed = header.extra["seed"].as_u64().unwrap_or(0);
        let mut model = Self::new(config, vocab, seed)?;
        checkpoint::check_compatible(header, ARCHITECTURE, Some(&model.vocab_hash()), None)?;
        checkpoint::restore_into(&mut model.store, loaded)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (header, store) = checkpoint::load(path)?;
        Self::from_checkpoint(&header, &store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (header, store) = checkpoint::from_bytes(bytes)?;
        Self::from_checkpoint(&header, &store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a dev-MAE gain larger than `min_delta` before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            patience: 10,
            min_delta: 0.0,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpsrReport {
    pub history: Vec<EpochMetrics>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_mae: f64,
    /// Dev MAE of always predicting the mean training score.
    pub baseline_dev_mae: f64,
    pub final_train_mse: f64,
    /// Pairs dropped because a plan exceeded the node cap.
    pub skipped_pairs: usize,
}

/// MSE, MAE and predictions of the model on `pairs`.
pub fn evaluate_pairs(
    model: &StructureModel,
    plans: &[PlanTree],
    pairs: &[ScoredPair],
) -> Result<(f64, f64, Vec<f64>), ModelError> {
    let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let (w, b) = model.head_weights();
    let mut preds = Vec::with_capacity(pairs.len());
    for p in pairs {
        for i in [p.a, p.b] {
            if !cache.contains_key(&i) {
                let v = model.encode_plan(&plans[i])?.vector;
                cache.insert(i, v);
            }
        }
        preds.push(match_pair(&cache[&p.a], &cache[&p.b], &w, b)?);
    }
    let truth: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    Ok((crate::metrics::mse(&preds, &truth), crate::metrics::mae(&preds, &truth), preds))
}

fn check_pairs(plans: &[PlanTree], pairs: &[ScoredPair]) -> Result<(), ModelError> {
    for (index, p) in pairs.iter().enumerate() {
        if !(0.0..=1.0).contains(&p.score) {
            return Err(ModelError::ScoreOutOfRange { index, score: p.score });
        }
        if p.a >= plans.len() || p.b >= plans.len() {
            return Err(ModelError::InvalidConfig(format!("pair {index} refers to a missing plan")));
        }
    }
    Ok(())
}

/// Copies every parameter value from `snapshot`, keeping trainable flags.
pub(crate) fn restore_values(store: &mut ParamStore, snapshot: &ParamStore) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        *store.value_mut(id) = snapshot.value(id).clone();
    }
}

/// Plan-pair similarity regression: minimizes MSE between the matching head
/// and Smatch scores, monitors dev MAE, stops on stagnation and restores the
/// best-dev parameters.
pub fn train_ppsr(
    model: &mut StructureModel,
    plans: &[PlanTree],
    train: &[ScoredPair],
    dev: &[ScoredPair],
    opts: &TrainOptions,
) -> Result<PpsrReport, ModelError> {
    check_pairs(plans, train)?;
    check_pairs(plans, dev)?;
    let fits = |p: &&ScoredPair| plans[p.a].node_count <= MAX_PLAN_NODES && plans[p.b].node_count <= MAX_PLAN_NODES;
    let train_kept: Vec<ScoredPair> = train.iter().filter(fits).cloned().collect();
    let dev_kept: Vec<ScoredPair> = dev.iter().filter(fits).cloned().collect();
    let skipped = train.len() + dev.len() - train_kept.len() - dev_kept.len();
    if skipped > 0 {
        log::warn!("skipped {skipped} pairs with plans above {MAX_PLAN_NODES} nodes");
    }
    if train_kept.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let monitor = if dev_kept.is_empty() { &train_kept } else { &dev_kept };

    let mut ids: HashMap<usize, EncodedIds> = HashMap::new();
    for p in &train_kept {
        for i in [p.a, p.b] {
            if !ids.contains_key(&i) {
                ids.insert(i, model.ids(&plans[i])?);
            }
        }
    }
    let mean_score = mean(&train_kept.iter().map(|p| p.score).collect::<Vec<_>>());
    let baseline = mean(&monitor.iter().map(|p| (p.score - mean_score).abs()).collect::<Vec<_>>());

    let mut opt = Adam::new(opts.lr);
    opt.clip_norm = opts.clip_norm;
    let mut stopper = EarlyStopping::new(opts.patience.max(1), opts.min_delta);
    let mut best_store = model.store.clone();
    let mut history = Vec::new();
    let mut final_train_mse = f64::NAN;
    let mut epochs_run = 0;
    let batch_size = opts.batch_size.max(1);

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..train_kept.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        let mut sae = 0.0;
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            let mut slot: HashMap<usize, usize> = HashMap::new();
            let mut rows = Vec::new();
            for &k in chunk {
                let p = &train_kept[k];
                for i in [p.a, p.b] {
                    if !slot.contains_key(&i) {
                        slot.insert(i, rows.len());
                        rows.push(model.encoder.encode(&mut tape, &model.store, &ids[&i], Some(&mut rng))?);
                    }
                }
            }
            let emb = tape.concat_rows(&rows);
            let a_idx: Vec<usize> = chunk.iter().map(|&k| slot[&train_kept[k].a]).collect();
            let b_idx: Vec<usize> = chunk.iter().map(|&k| slot[&train_kept[k].b]).collect();
            let va = tape.gather_rows(emb, &a_idx);
            let vb = tape.gather_rows(emb, &b_idx);
            let pred = model.head.forward(&mut tape, &model.store, va, vb);
            let target = Tensor::new(chunk.len(), 1, chunk.iter().map(|&k| train_kept[k].score).collect())?;
            let loss = tape.mse(pred, &target, None);
            for (p, t) in tape.value(pred).data().iter().zip(target.data()) {
                sse += (p - t).powi(2);
                sae += (p - t).abs();
            }
            let g = tape.backward(loss);
            let grads = tape.param_grads(&g, model.store.len());
            opt.step(&mut model.store, &grads);
        }
        let n = train_kept.len() as f64;
        final_train_mse = sse / n;
        history.push(EpochMetrics {
            epoch,
            split: "train".into(),
            mse: sse / n,
            mae: sae / n,
        });
        let (dev_mse, dev_mae, _) = evaluate_pairs(model, plans, monitor)?;
        history.push(EpochMetrics {
            epoch,
            split: "dev".into(),
            mse: dev_mse,
            mae: dev_mae,
        });
        epochs_run = epoch + 1;
        if stopper.update(epoch, dev_mae) {
            best_store = model.store.clone();
        }
        log::debug!("ppsr epoch {epoch}: train mse {:.5} dev mae {dev_mae:.5}", sse / n);
        if stopper.should_stop() {
            break;
        }
    }
    restore_values(&mut model.store, &best_store);
    Ok(PpsrReport {
        history,
        epochs_run,
        best_epoch: stopper.best_epoch,
        best_dev_mae: stopper.best,
        baseline_dev_mae: baseline,
        final_train_mse,
        skipped_pairs: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Every parameter is updated.
    FinetuneAll,
    /// The encoder is frozen; only the matching head is trained.
    FixedFeatures,
}

impl FinetuneMode {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::FinetuneAll => "finetune-all",
            FinetuneMode::FixedFeatures => "fixed-features",
        }
    }
}

/// Continues training a pretrained model on a `fraction` of new-domain pairs.
pub fn finetune_structure(
    pretrained: &StructureModel,
    plans: &[PlanTree],
    train: &[ScoredPair],
    dev: &[ScoredPair],
    fraction: f64,
    mode: FinetuneMode,
    opts: &TrainOptions,
) -> Result<(StructureModel, PpsrReport), ModelError> {
    check_fraction(fraction)?;
    let subset = take_fraction(train, fraction, opts.seed);
    let mut model = pretrained.clone();
    model.set_encoder_trainable(mode == FinetuneMode::FinetuneAll);
    let report = train_ppsr(&mut model, plans, &subset, dev, opts)?;
    model.set_encoder_trainable(true);
    Ok((model, report))
}

/// One row of the MAE-vs-fraction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    /// `finetune-all`, `fixed-features` or `scratch`.
    pub mode: String,
    pub dev_mae: f64,
    pub test_mae: f64,
    pub epochs_run: usize,
}

pub fn fraction_rows_csv(rows: &[FractionRow]) -> String {
    let mut out = String::from("fraction,mode,dev_mae,test_mae,epochs\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.fraction, r.mode, r.dev_mae, r.test_mae, r.epochs_run));
    }
    out
}

/// Finetunes at each fraction in each mode, optionally alongside a model
/// trained from scratch on the same subset.
#[allow(clippy::too_many_arguments)]
pub fn fraction_sweep(
    pretrained: &StructureModel,
    plans: &[PlanTree],
    train: &[ScoredPair],
    dev: &[ScoredPair],
    test: &[ScoredPair],
    fractions: &[f64],
    modes: &[FinetuneMode],
    with_scratch: bool,
    opts: &TrainOptions,
) -> Result<Vec<FractionRow>, ModelError> {
    let mut rows = Vec::new();
    for &fraction in fractions {
        for &mode in modes {
            let (model, report) = finetune_structure(pretrained, plans, train, dev, fraction, mode, opts)?;
            rows.push(FractionRow {
                fraction,
                mode: mode.name().into(),
                dev_mae: report.best_dev_mae,
                test_mae: evaluate_pairs(&model, plans, test)?.1,
                epochs_run: report.epochs_run,
            });
        }
        if with_scratch {
            check_fraction(fraction)?;
            let subset = take_fraction(train, fraction, opts.seed);
            let mut model = StructureModel::new(pretrained.config.clone(), pretrained.vocab.clone(), pretrained.seed ^ 0x5c)?;
            let report = train_ppsr(&mut model, plans, &subset, dev, opts)?;
            rows.push(FractionRow {
                fraction,
                mode: "scratch".into(),
                dev_mae: report.best_dev_mae,
                test_mae: evaluate_pairs(&model, plans, test)?.1,
                epochs_run: report.epochs_run,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use qplan_core::plan::parse_plan_document;

    fn tiny() -> StructureEncoderConfig {
        StructureEncoderConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 8,
            max_sequence_length: 32,
            dropout: 0.0,
            level_dims: [4, 2, 2],
        }
    }

    fn plan(text: &str) -> PlanTree {
        parse_plan_document(text).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(StructureEncoderConfig::default().validate().is_ok());
        let mut c = tiny();
        c.level_dims = [4, 4, 4];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn input_embedding_is_level_concat_plus_position() {
        let m = StructureModel::new(tiny(), Vocabulary::default(), 1).unwrap();
        let ids = m.ids(&plan(r#"{"Node Type": "Seq Scan"}"#)).unwrap();
        let mut tape = Tape::new();
        let x = m.encoder.embed_inputs(&mut tape, &m.store, &ids).unwrap();
        let x = tape.value(x);
        assert_eq!(x.shape(), [3, 8]);
        let row = |t: &Embedding, i: u32| m.store.value(t.table).row(i as usize).to_vec();
        for pos in 0..3 {
            let mut expect = row(&m.encoder.tables[0], ids.level1[pos]);
            expect.extend(row(&m.encoder.tables[1], ids.level2[pos]));
            expect.extend(row(&m.encoder.tables[2], ids.level3[pos]));
            let p = m.store.value(m.encoder.positions.table).row(pos);
            for c in 0..8 {
                assert_eq!(x.get(pos, c), expect[c] + p[c]);
            }
        }
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let m = StructureModel::new(tiny(), Vocabulary::default(), 1).unwrap();
        let ids = EncodedIds {
            level1: vec![0, 999],
            level2: vec![0, 0],
            level3: vec![0, 0],
        };
        let mut tape = Tape::new();
        assert!(matches!(
            m.encoder.embed_inputs(&mut tape, &m.store, &ids),
            Err(ModelError::UnknownId { level: 1, id: 999, .. })
        ));
    }

    #[test]
    fn head_properties() {
        let vi = [0.3, -1.0, 2.0];
        let w = vec![0.0; 12];
        assert_eq!(match_pair(&vi, &[5.0, 1.0, 0.0], &w, 0.0).unwrap(), 0.5);
        let f = match_features(&vi, &vi);
        assert!(f[6..9].iter().all(|x| *x == 0.0));
        // Equal weights on vi and vj and none on vi−vj make the head symmetric.
        let w: Vec<f64> = (0..12)
            .map(|i| match i {
                0..=5 => 0.1 * (i % 3) as f64 + 0.05,
                6..=8 => 0.0,
                _ => -0.2,
            })
            .collect();
        let vj = [1.0, 0.5, -0.5];
        assert_eq!(match_pair(&vi, &vj, &w, 0.2).unwrap(), match_pair(&vj, &vi, &w, 0.2).unwrap());
        let w = vec![50.0; 12];
        let s = match_pair(&vi, &vj, &w, 0.0).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert!(match_pair(&vi, &vj[..2], &w, 0.0).is_err());
    }

    #[test]
    fn permuted_children_embed_identically() {
        let m = StructureModel::new(tiny(), Vocabulary::default(), 2).unwrap();
        let a = plan(r#"{"Node Type": "Hash Join", "Plans": [{"Node Type": "Seq Scan"}, {"Node Type": "Hash", "Plans": [{"Node Type": "Index Scan"}]}]}"#);
        let b = plan(r#"{"Node Type": "Hash Join", "Plans": [{"Node Type": "Hash", "Plans": [{"Node Type": "Index Scan"}]}, {"Node Type": "Seq Scan"}]}"#);
        assert_eq!(m.encode_plan(&a).unwrap().vector, m.encode_plan(&b).unwrap().vector);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = StructureModel::new(tiny(), Vocabulary::default(), 3).unwrap();
        let back = StructureModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_scores_and_empty_data() {
        let mut m = StructureModel::new(tiny(), Vocabulary::default(), 3).unwrap();
        let plans = vec![plan(r#"{"Node Type": "Seq Scan"}"#)];
        let bad = [ScoredPair { a: 0, b: 0, score: 1.5 }];
        let opts = TrainOptions::default();
        assert!(matches!(train_ppsr(&mut m, &plans, &bad, &[], &opts), Err(ModelError::ScoreOutOfRange { .. })));
        assert!(matches!(train_ppsr(&mut m, &plans, &[], &[], &opts), Err(ModelError::EmptyDataset)));
    }
}

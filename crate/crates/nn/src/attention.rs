//! Multi-head self-attention and the post-norm transformer block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{LayerNorm, Linear};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::{NnError, Tensor};

/// Per-head projections `W^Q_i, W^K_i, W^V_i` (each `d × d_head`) and the
/// output projection `W^O` (`h·d_head × d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: ParamId,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(NnError::InvalidConfig(format!(
                "model width {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let d_head = d_model / n_heads;
        let mut proj = |kind: &str, i: usize| store.add(&format!("{name}.{kind}{i}"), xavier_uniform(d_model, d_head, rng), true);
        let mut w_q = Vec::new();
        let mut w_k = Vec::new();
        let mut w_v = Vec::new();
        for i in 0..n_heads {
            w_q.push(proj("wq", i));
            w_k.push(proj("wk", i));
            w_v.push(proj("wv", i));
        }
        let w_o = store.add(&format!("{name}.wo"), xavier_uniform(n_heads * d_head, d_model, rng), true);
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            d_model,
            n_heads,
            d_head,
        })
    }

    /// Self-attention over the rows of `x` (`n × d`). Keys with
    /// `key_mask[j] == false` receive no attention. Returns the output and
    /// each head's attention-weight matrix.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for i in 0..self.n_heads {
            let wq = tape.param(store, self.w_q[i]);
            let wk = tape.param(store, self.w_k[i]);
            let wv = tape.param(store, self.w_v[i]);
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, scale);
            let a = tape.softmax_rows(scores, key_mask);
            heads.push(tape.matmul(a, v));
            weights.push(a);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let wo = tape.param(store, self.w_o);
        (tape.matmul(cat, wo), weights)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, key_mask: Option<&[bool]>) -> Var {
        self.forward_with_weights(tape, store, x, key_mask).0
    }
}

/// Evaluates self-attention on a plain tensor, checking shapes first.
/// Returns the `n × d` output and the per-head attention weights.
pub fn multihead_self_attention(
    x: &Tensor,
    attn: &MultiHeadAttention,
    store: &ParamStore,
) -> Result<(Tensor, Vec<Tensor>), NnError> {
    if x.rows() == 0 || x.cols() != attn.d_model {
        return Err(NnError::ShapeMismatch {
            op: "multihead_self_attention",
            left: x.shape(),
            right: [attn.d_model, attn.d_model],
        });
    }
    for id in attn.w_q.iter().chain(&attn.w_k).chain(&attn.w_v) {
        if store.value(*id).shape() != [attn.d_model, attn.d_head] {
            return Err(NnError::ShapeMismatch {
                op: "multihead_self_attention",
                left: store.value(*id).shape(),
                right: [attn.d_model, attn.d_head],
            });
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (y, w) = attn.forward_with_weights(&mut tape, store, xv, None);
    Ok((tape.value(y).clone(), w.into_iter().map(|v| tape.value(v).clone()).collect()))
}

/// `LN(x + Attn(x))` followed by `LN(h + FFN(h))`, with a ReLU feed-forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, n_heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            ff1: Linear::new(store, &format!("{name}.ff1"), d_model, d_ff, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), d_ff, d_model, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, key_mask: Option<&[bool]>) -> Var {
        let a = self.attn.forward(tape, store, x, key_mask);
        let h = tape.add(x, a);
        let h = self.ln1.forward(tape, store, h);
        let f = self.ff1.forward(tape, store, h);
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, store, f);
        let o = tape.add(h, f);
        self.ln2.forward(tape, store, o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_position_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let attn = MultiHeadAttention::new(&mut store, "a", 3, 1, &mut rng).unwrap();
        *store.value_mut(attn.w_q[0]) = Tensor::zeros(3, 3);
        *store.value_mut(attn.w_k[0]) = Tensor::zeros(3, 3);
        *store.value_mut(attn.w_v[0]) = Tensor::eye(3);
        *store.value_mut(attn.w_o) = Tensor::eye(3);
        let x = Tensor::row_vector(vec![0.3, -1.2, 2.5]);
        let (y, w) = multihead_self_attention(&x, &attn, &store).unwrap();
        assert_eq!(y, x);
        assert_eq!(w[0].data(), &[1.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng).is_err());
        let attn = MultiHeadAttention::new(&mut store, "b", 4, 2, &mut rng).unwrap();
        assert!(multihead_self_attention(&Tensor::zeros(2, 3), &attn, &store).is_err());
        assert!(multihead_self_attention(&Tensor::zeros(0, 4), &attn, &store).is_err());
    }

    #[test]
    fn masked_keys_do_not_change_unpadded_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = TransformerBlock::new(&mut store, "blk", 4, 2, 8, &mut rng).unwrap();
        let x = xavier_uniform(3, 4, &mut rng);
        let mut padded = Tensor::zeros(5, 4);
        padded.data_mut()[..12].copy_from_slice(x.data());
        for v in &mut padded.data_mut()[12..] {
            *v = 9.0;
        }
        let mut t = Tape::new();
        let a = t.constant(x);
        let ya = block.forward(&mut t, &store, a, None);
        let b = t.constant(padded);
        let yb = block.forward(&mut t, &store, b, Some(&[true, true, true, false, false]));
        let yb = t.slice_rows(yb, 0, 3);
        assert!(t.value(ya).max_abs_diff(t.value(yb)) < 1e-12);
    }
}

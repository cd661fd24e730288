//! Parameterized building blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tape::{BatchStats, Tape, Var};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// `y = x W + b`, with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add(&format!("{name}.w"), xavier_uniform(in_dim, out_dim, rng), true);
        let b = bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(1, out_dim), true));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stack of linear layers, each followed by the activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        activate_last: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self {
            layers,
            activation,
            activate_last,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, store, x);
            if i + 1 < n || self.activate_last {
                x = self.activation.apply(tape, x);
            }
        }
        x
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let table = store.add(&format!("{name}.table"), xavier_uniform(vocab, dim, rng), true);
        Self { table, vocab, dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Var {
        let t = tape.param(store, self.table);
        tape.gather_rows(t, ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(1, dim, 1.0), true),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(1, dim), true),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Batch normalization over rows with running statistics kept as
/// non-trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(1, dim, 1.0), true),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(1, dim), true),
            running_mean: store.add(&format!("{name}.running_mean"), Tensor::zeros(1, dim), false),
            running_var: store.add(&format!("{name}.running_var"), Tensor::full(1, dim, 1.0), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes with batch statistics; fold them in with [`BatchNorm::update_running`].
    pub fn forward_train(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> (Var, BatchStats) {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm_train(x, g, b, self.eps)
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mean = store.value(self.running_mean);
        let var = store.value(self.running_var);
        let scale = Tensor::row_vector(var.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect());
        let shift = Tensor::row_vector(
            mean.data()
                .iter()
                .zip(scale.data())
                .map(|(m, s)| -m * s)
                .collect(),
        );
        let scale = tape.constant(scale);
        let shift = tape.constant(shift);
        let xn = tape.mul_row(x, scale);
        let xn = tape.add_row(xn, shift);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul_row(xn, g);
        tape.add_row(y, b)
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        let m = self.momentum;
        for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
            for (r, b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_converge_to_batch_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = Tensor::new(3, 2, vec![1.0, 0.0, 2.0, 0.0, 3.0, 3.0]).unwrap();
        for _ in 0..200 {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let (_, stats) = bn.forward_train(&mut t, &store, xv);
            bn.update_running(&mut store, &stats);
        }
        let mean = store.value(bn.running_mean);
        assert!((mean.get(0, 0) - 2.0).abs() < 1e-6);
        assert!((mean.get(0, 1) - 1.0).abs() < 1e-6);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (train, _) = bn.forward_train(&mut t, &store, xv);
        let eval = bn.forward_eval(&mut t, &store, xv);
        assert!(t.value(train).max_abs_diff(t.value(eval)) < 1e-4);
    }

    #[test]
    fn mlp_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", &[5, 8, 3], Activation::Relu, false, &mut rng);
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(4, 5, 0.5));
        let y = mlp.forward(&mut t, &store, x);
        assert_eq!(t.value(y).shape(), [4, 3]);
        assert_eq!(mlp.out_dim(), 3);
        assert_eq!(store.len(), 4);
    }
}

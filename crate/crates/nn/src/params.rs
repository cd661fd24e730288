//! Named parameter storage and gradient buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (running statistics) and frozen weights are not trainable.
    pub trainable: bool,
}

/// All parameters of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name: name.to_owned(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    /// Number of scalar values in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values from `other` for every parameter whose name (after
    /// stripping `from_prefix` and prepending `to_prefix`) exists here with the
    /// same shape. Returns the number of parameters copied.
    pub fn copy_matching(&mut self, other: &ParamStore, from_prefix: &str, to_prefix: &str) -> Result<usize, NnError> {
        let mut n = 0;
        for p in &other.params {
            let Some(rest) = p.name.strip_prefix(from_prefix) else {
                continue;
            };
            let name = format!("{to_prefix}{rest}");
            if let Some(id) = self.find(&name) {
                let dst = &mut self.params[id.0].value;
                if dst.shape() != p.value.shape() {
                    return Err(NnError::ShapeMismatch {
                        op: "copy_matching",
                        left: dst.shape(),
                        right: p.value.shape(),
                    });
                }
                *dst = p.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Xavier-uniform initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}

/// Gradients indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        if id.0 >= self.slots.len() {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self`, slot by slot.
    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.slots.iter_mut().flatten() {
            *g = g.scale(k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bounds_and_determinism() {
        let a = xavier_uniform(30, 20, &mut ChaCha8Rng::seed_from_u64(1));
        let b = xavier_uniform(30, 20, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let lim = (6.0f64 / 50.0).sqrt();
        assert!(a.data().iter().all(|x| x.abs() < lim));
    }

    #[test]
    fn copy_matching_by_prefix() {
        let mut a = ParamStore::new();
        a.add("enc.w", Tensor::full(2, 2, 1.0), true);
        a.add("head.w", Tensor::full(1, 1, 5.0), true);
        let mut b = ParamStore::new();
        let id = b.add("model.enc.w", Tensor::zeros(2, 2), true);
        assert_eq!(b.copy_matching(&a, "enc.", "model.enc.").unwrap(), 1);
        assert_eq!(b.value(id), &Tensor::full(2, 2, 1.0));
        assert_eq!(b.set_trainable_prefix("model.", false), 1);
        assert_eq!(b.trainable_count(), 0);
    }
}

//! Named parameter tensors with accumulated gradients.
//!
//! Each store owns one seeded RNG stream derived from `(seed, store name)`;
//! parameters are drawn from it in insertion order, so two stores built
//! with the same seed and the same architecture are bitwise equal.

use crate::tape::{Gradients, ParamMode, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::{CosaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How a parameter tensor is filled at creation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    UniformFanIn { fan_in: usize },
    Zero,
}

struct Entry<F> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
}

pub struct ParamStore<F = f32> {
    name: String,
    seed: u64,
    rng: ChaCha8Rng,
    entries: Vec<Entry<F>>,
}

/// FNV-1a over the store name, mixed with the run seed, so each store
/// gets its own stable stream.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        let name = name.into();
        let rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &name));
        Self {
            name,
            seed,
            rng,
            entries: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(CosaError::Config(format!(
                "duplicate parameter {} in store {}",
                name, self.name
            )));
        }
        let value = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::UniformFanIn { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| {
                    // Draw in f32 regardless of F so f64 replicas see the
                    // exact production values.
                    let u: f32 = rng.gen();
                    F::from_f32((u * 2.0 - 1.0) * bound as f32)
                })
            }
        };
        let grad = Tensor::zeros(shape);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, name: &str) -> &Tensor<F> {
        &self
            .entries
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no parameter {} in store {}", name, self.name))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor<F> {
        &self
            .entries
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no parameter {} in store {}", name, self.name))
            .grad
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<F>) {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        assert_eq!(entry.value.shape(), value.shape(), "set_value shape");
        entry.value = value;
    }

    pub fn iter_values(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = F::ZERO;
            }
        }
    }

    /// Add this store's share of `grads` into the accumulated gradients.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for e in &mut self.entries {
            if let Some(g) = grads.get(&self.name, &e.name) {
                for (a, b) in e.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }

    /// Visit `(name, value, grad)` mutably, in insertion order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>, &Tensor<F>)) {
        for e in &mut self.entries {
            f(&e.name, &mut e.value, &e.grad);
        }
    }

    /// Insert every parameter of this store into a tape.
    ///
    /// Returns leaves in insertion order; convenience for module forwards.
    pub fn leaf(&self, tape: &mut Tape<F>, param: &str, mode: ParamMode) -> crate::tape::NodeRef {
        tape.leaf(&self.name, param, self.value(param).clone(), mode)
    }

    /// Replicate the store at another precision (used by the 64-bit
    /// gradient-check oracle).
    pub fn convert<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            name: self.name.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.convert(),
                    grad: e.grad.convert(),
                })
                .collect(),
        }
    }

    /// Soft update: `self <- zeta * live + (1 - zeta) * self`, elementwise.
    pub fn soft_update_from(&mut self, live: &ParamStore<F>, zeta: f64) -> Result<()> {
        if live.entries.len() != self.entries.len() {
            return Err(CosaError::Shape(format!(
                "soft update: store {} has {} params, target has {}",
                live.name,
                live.entries.len(),
                self.entries.len()
            )));
        }
        let z = F::from_f64(zeta);
        let one_minus = F::ONE - z;
        for (t, l) in self.entries.iter_mut().zip(&live.entries) {
            if t.value.shape() != l.value.shape() {
                return Err(CosaError::Shape(format!(
                    "soft update: {} shape {:?} vs {:?}",
                    t.name,
                    t.value.shape(),
                    l.value.shape()
                )));
            }
            for (tv, lv) in t.value.data_mut().iter_mut().zip(l.value.data()) {
                *tv = z * *lv + one_minus * *tv;
            }
        }
        Ok(())
    }

    /// Hard copy of values under a new store name (target-network creation).
    pub fn clone_as(&self, name: impl Into<String>) -> ParamStore<F> {
        let name = name.into();
        ParamStore {
            rng: ChaCha8Rng::seed_from_u64(stream_seed(self.seed, &name)),
            name,
            seed: self.seed,
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    grad: Tensor::zeros(e.grad.shape()),
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

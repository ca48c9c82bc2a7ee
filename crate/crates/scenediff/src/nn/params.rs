//! Named parameter store with Adam optimizer state.

use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::graph::{Grads, Graph, Var};
use super::scalar::Real;
use crate::error::{Error, Result};

pub struct ParamEntry<T: Real> {
    pub value: Arc<ArrayD<T>>,
    pub frozen: bool,
    m: ArrayD<T>,
    v: ArrayD<T>,
}

/// Named parameters. Iteration order is insertion order, which keeps every
/// reduction and update deterministic.
pub struct ParamStore<T: Real> {
    entries: IndexMap<String, ParamEntry<T>>,
    /// Adam step counter (shared across parameters).
    pub step_count: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
            step_count: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>) {
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value: Arc::new(value),
                frozen: false,
                m,
                v,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.entries
            .get(name)
            .map(|e| e.value.as_ref())
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if let Some(e) = self.entries.get_mut(name) {
            e.frozen = frozen;
        }
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.frozen = true;
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.frozen).unwrap_or(false)
    }

    /// Enter a parameter into a graph. Trainable (non-frozen) parameters are
    /// registered so [`GradAccum::absorb`] can find their gradients; frozen
    /// parameters enter as shared constants — gradient still flows *through*
    /// them to upstream nodes but no update is ever applied.
    pub fn param(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let var = g.shared_leaf(e.value.clone());
        if !e.frozen {
            g.register_trainable(name.to_string(), var);
        }
        Ok(var)
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in e.value.iter() {
                h.update(x.to_f().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// AdamW step over an accumulated gradient batch.
    pub fn adam_step(&mut self, grads: &GradAccum<T>, cfg: &AdamConfig) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = T::from_f(cfg.beta1);
        let b2 = T::from_f(cfg.beta2);
        let one = T::one();
        let lr = T::from_f(cfg.lr);
        let eps = T::from_f(cfg.eps);
        let bc1 = T::from_f(1.0 - cfg.beta1.powf(t));
        let bc2 = T::from_f(1.0 - cfg.beta2.powf(t));
        for (name, grad) in &grads.acc {
            let Some(e) = self.entries.get_mut(name) else {
                continue;
            };
            if e.frozen {
                continue;
            }
            let scale = T::from_f(1.0 / grads.count.max(1) as f64);
            // Decoupled weight decay on matrices only (biases and gains skip).
            if cfg.weight_decay > 0.0 && e.value.ndim() >= 2 {
                let wd = T::from_f(cfg.lr * cfg.weight_decay);
                Arc::make_mut(&mut e.value).mapv_inplace(|x| x - wd * x);
            }
            let value = Arc::make_mut(&mut e.value);
            ndarray::Zip::from(value)
                .and(&mut e.m)
                .and(&mut e.v)
                .and(grad)
                .for_each(|p, m, v, &graw| {
                    let gi = graw * scale;
                    *m = b1 * *m + (one - b1) * gi;
                    *v = b2 * *v + (one - b2) * gi * gi;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Convert precision (f32 <-> f64) preserving names and freeze flags.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::<U>::new();
        for (name, e) in &self.entries {
            out.insert(name, e.value.mapv(|x| U::from_f(x.to_f())));
            out.set_frozen(name, e.frozen);
        }
        out.step_count = self.step_count;
        out
    }

    pub(crate) fn iter_entries(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic batch-gradient reducer: absorbs one graph's gradients at a
/// time (in batch order), then feeds a single Adam step.
pub struct GradAccum<T: Real> {
    acc: IndexMap<String, ArrayD<T>>,
    count: usize,
}

impl<T: Real> Default for GradAccum<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> GradAccum<T> {
    pub fn new() -> Self {
        GradAccum {
            acc: IndexMap::new(),
            count: 0,
        }
    }

    pub fn absorb(&mut self, graph: &Graph<T>, grads: &Grads<T>) {
        for (name, var) in graph.trainable() {
            if let Some(g) = grads.get(*var) {
                match self.acc.get_mut(name) {
                    Some(a) => *a += g,
                    None => {
                        self.acc.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn grad(&self, name: &str) -> Option<&ArrayD<T>> {
        self.acc.get(name)
    }
}

// ---- initializers ----

pub fn xavier<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| {
        T::from_f(rng.gen_range(-bound..bound))
    })
}

pub fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::from_f(dist.sample(rng)))
}

pub fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

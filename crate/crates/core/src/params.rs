//! Named parameter maps and the binding of parameters into a [`Graph`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::{Real, Tensor};

/// Tensors addressed by stable dotted names. Iteration is in name order, so
/// any reduction over a store is independent of insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        match self.tensors.get(name) {
            Some(t) => Ok(t),
            None => bail!(ParamMap, "no parameter named `{name}`"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names with zero-filled tensors.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols()))).collect(),
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
        }
    }

    /// Adds every entry of `other` into `self`, which must have the same entries' shapes.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (name, t) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(dst) if dst.shape() == t.shape() => dst.add_assign(t),
                Some(dst) => bail!(ParamMap, "`{name}` has shape {:?}, got {:?}", dst.shape(), t.shape()),
                None => {
                    self.tensors.insert(name.clone(), t.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        for t in self.tensors.values_mut() {
            t.scale_assign(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Euclidean distance over the names shared with `other`.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        let mut total = 0.0;
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                bail!(ParamMap, "`{name}` shapes differ");
            }
            total += t.data().iter().zip(o.data()).map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            }).sum::<f64>();
        }
        Ok(libm::sqrt(total))
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect() }
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            eat(&(t.rows() as u64).to_le_bytes());
            eat(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

impl<F: Real> FromIterator<(String, Tensor<F>)> for ParamStore<F> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<F>)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

/// Initialization helpers writing into a store under a name prefix.
pub struct Init<'a, F, R> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut R,
}

impl<F: Real, R: Rng> Init<'_, F, R> {
    pub fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(rows, cols, |_, _| F::of(dist.sample(self.rng)));
        self.store.insert(name, t);
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, stored `(fan_in, fan_out)`.
    pub fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let t = Tensor::from_fn(fan_in, fan_out, |_, _| F::of(self.rng.random_range(-bound..bound)));
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) {
        self.store.insert(name, Tensor::full(rows, cols, F::of(value)));
    }
}

/// Lazily binds store entries as graph leaves, remembering each binding so
/// gradients can be collected by name afterwards.
pub struct Binder<'a, F> {
    store: &'a ParamStore<F>,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'a, F: Real> Binder<'a, F> {
    /// Leaves are trainable parameters.
    pub fn trainable(store: &'a ParamStore<F>) -> Self {
        Self { store, trainable: true, bound: BTreeMap::new() }
    }

    /// Leaves are constants: nothing downstream receives a gradient.
    pub fn frozen(store: &'a ParamStore<F>) -> Self {
        Self { store, trainable: false, bound: BTreeMap::new() }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter, zero-filled where nothing flowed.
    pub fn collect(&self, g: &Graph<F>, grads: &Grads<F>) -> ParamStore<F> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let t = grads.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = g.value(v).shape();
                    Tensor::zeros(r, c)
                });
                (name.clone(), t)
            })
            .collect()
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.bound.keys().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }
}

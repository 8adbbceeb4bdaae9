//! Named parameter storage, seeded initialization and tape bindings.

use std::ops::{Deref, DerefMut};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Tensor, Var};

const INIT_STREAM: u64 = 0x1A17;

/// How a parameter is drawn by [`ParamStore::init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    FanInUniform { fan_in: usize },
    /// Normal with the given std, truncated at two standard deviations.
    TruncNormal { std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    value: Tensor<T>,
    init: Init,
}

/// Ordered collection of trainable tensors keyed by hierarchical names.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Register a zero-filled parameter; values are drawn later by [`init`](Self::init).
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let value = Tensor::zeros(shape);
        let (idx, _) = self.entries.insert_full(name, Entry { value, init });
        Ok(ParamId(idx))
    }

    /// Draw every parameter from its own stream derived from `seed` and its index.
    pub fn init(&mut self, seed: u64) {
        for (i, entry) in self.entries.values_mut().enumerate() {
            let mut rng = SplitMix64::derive(seed, &[INIT_STREAM, i as u64]);
            let init = entry.init;
            for v in entry.value.data_mut() {
                *v = T::from_f64(match init {
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    Init::FanInUniform { fan_in } => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        rng.uniform(-bound, bound)
                    }
                    Init::TruncNormal { std } => rng.truncated_normal(std),
                });
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn init_kind(&self, id: ParamId) -> Init {
        self.entries[id.0].init
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape("set parameter", entry.value.shape(), value.shape()));
        }
        entry.value = value;
        Ok(())
    }
}

/// Per-parameter gradients, indexed like the store they came from.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: (0..len).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads[id.0] = Some(grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum, in place.
    pub fn accumulate(&mut self, other: ParamGrads<T>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => *slot = Some(g),
            }
        }
    }
}

/// A tape plus lazily created leaves for the parameters it reads.
pub struct Graph<'p, T: Scalar> {
    tape: Tape<T>,
    store: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// With `trainable` false no parameter leaf requires a gradient.
    pub fn new(store: &'p ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Reverse pass from `root` seeded with `seed`; returns parameter gradients.
    pub fn backward_params(self, root: Var, seed: Tensor<T>) -> Result<ParamGrads<T>> {
        let bound = self.bound;
        let mut grads = self.tape.backward_from(root, seed)?;
        Ok(ParamGrads {
            grads: bound.into_iter().map(|b| b.and_then(|v| grads.take(v))).collect(),
        })
    }
}

impl<T: Scalar> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

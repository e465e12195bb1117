//! Named parameter storage and the bridge onto an autodiff tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use glean_autograd::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GleanError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Rc<Tensor>,
    trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value: Rc::new(value), trainable: true });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_rc(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.entries[id.0].value)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replace a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(GleanError::Shape(format!(
                "parameter {} is {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = Rc::new(value);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), e.value.as_ref()))
    }

    /// Total scalar count of the parameters accepted by `filter`.
    pub fn count(&self, mut filter: impl FnMut(&str, bool) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| filter(&e.name, e.trainable))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Copy every value of `src` whose name starts with `prefix` into the
    /// parameter of the same name here. Missing names or shape changes fail.
    pub fn load_matching(&mut self, src: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in src.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let id = self
                .id(&e.name)
                .ok_or_else(|| GleanError::Checkpoint(format!("unexpected parameter {}", e.name)))?;
            self.set(id, e.value.as_ref().clone())
                .map_err(|err| GleanError::Checkpoint(err.to_string()))?;
            self.entries[id.0].trainable = e.trainable;
            copied += 1;
        }
        let expected = self.entries.iter().filter(|e| e.name.starts_with(prefix)).count();
        if copied != expected {
            return Err(GleanError::Checkpoint(format!(
                "prefix {prefix:?}: checkpoint supplies {copied} of {expected} parameters"
            )));
        }
        Ok(copied)
    }

    pub fn bitwise_eq(&self, other: &ParamStore, prefix: &str) -> bool {
        let mine: Vec<_> = self.entries.iter().filter(|e| e.name.starts_with(prefix)).collect();
        let theirs: Vec<_> = other.entries.iter().filter(|e| e.name.starts_with(prefix)).collect();
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Binds store parameters onto a tape, once per parameter per pass. The
/// binder snapshots the store's tensor handles, so it does not borrow it.
pub struct Binder<'t> {
    tape: &'t Tape,
    values: Vec<(Rc<Tensor>, bool)>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Binder<'t> {
    /// `track = false` binds everything as constants (inference, or a
    /// network whose weights are held fixed for this pass).
    pub fn new(tape: &'t Tape, store: &ParamStore, track: bool) -> Self {
        let values = store.entries.iter().map(|e| (Rc::clone(&e.value), track && e.trainable)).collect();
        Self { tape, values, bound: RefCell::new(vec![None; store.len()]) }
    }

    /// Track only trainable parameters whose name starts with `prefix`.
    pub fn tracking_prefix(tape: &'t Tape, store: &ParamStore, prefix: &str) -> Self {
        let values = store
            .entries
            .iter()
            .map(|e| (Rc::clone(&e.value), e.trainable && e.name.starts_with(prefix)))
            .collect();
        Self { tape, values, bound: RefCell::new(vec![None; store.len()]) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let (value, rg) = &self.values[id.0];
            self.tape.leaf(Rc::clone(value), *rg)
        })
    }

    /// Gradients of every trainable parameter touched by the pass.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !v.requires_grad() {
                    return None;
                }
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

/// LeakyReLU(0.2) gain for He-style initialisation.
pub const LRELU_GAIN: f32 = 1.386_750_5;

/// Uniform He initialisation: `U(-b, b)` with `b = gain·√(3/fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, gain: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = gain * (3.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

pub(crate) fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

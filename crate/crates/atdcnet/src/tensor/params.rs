//! Named parameter storage, decoupled from any single tape.
//!
//! A [`ParamStore`] owns the persistent values (weights, biases, batch-norm
//! scale/shift and running statistics). Each forward pass binds the tape
//! parameters as fresh leaves via [`BoundParams::bind`]; after backward,
//! [`BoundParams::harvest`] folds the leaf gradients back into the store.

use std::collections::HashMap;

use super::tape::{Tape, TensorId};
use super::{numel, shape_err, Elem, Shape, TensorError};

/// How an entry participates in training.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    /// Bound to the tape with gradients when training.
    Trainable,
    /// Bound to the tape, never receives gradients (frozen weights).
    Fixed,
    /// Never bound; mutated in place during forward (running statistics).
    Stat,
}

pub struct ParamEntry<E> {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<E>,
    pub grad: Vec<E>,
    pub kind: ParamKind,
}

pub struct ParamStore<E: Elem> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique; insertion order is the
    /// canonical order for checkpoints and optimizer state.
    pub fn insert(
        &mut self,
        name: &str,
        shape: impl Into<Shape>,
        data: Vec<E>,
        kind: ParamKind,
    ) -> Result<usize, TensorError> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "param_insert",
                format!("{name}: shape {:?} does not describe {} elements", shape, data.len()),
            ));
        }
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let idx = self.entries.len();
        self.index.insert(name.to_string(), idx);
        let grad = vec![E::ZERO; data.len()];
        self.entries.push(ParamEntry { name: name.to_string(), shape, data, grad, kind });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<E> {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry<E> {
        &mut self.entries[idx]
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<E>> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<E>> {
        let i = self.index_of(name)?;
        Some(&mut self.entries[i])
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry<E>> {
        self.entries.iter()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(E::ZERO);
        }
    }

    /// Number of scalars in trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.data.len())
            .sum()
    }
}

/// Tape leaf ids for one bound forward pass, aligned with store indices.
pub struct BoundParams {
    ids: Vec<Option<TensorId>>,
}

impl BoundParams {
    /// Copies every tape-visible entry onto `tape` as a leaf. With `train`
    /// set, trainable entries request gradients.
    pub fn bind<E: Elem>(
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        train: bool,
    ) -> Result<Self, TensorError> {
        let mut ids = Vec::with_capacity(store.len());
        for e in store.entries() {
            let id = match e.kind {
                ParamKind::Trainable => {
                    Some(tape.leaf(e.shape.clone(), e.data.clone(), train)?)
                }
                ParamKind::Fixed => Some(tape.leaf(e.shape.clone(), e.data.clone(), false)?),
                ParamKind::Stat => None,
            };
            ids.push(id);
        }
        Ok(BoundParams { ids })
    }

    /// Tape id of a bound entry; panics for stat entries, which never live
    /// on the tape.
    pub fn id(&self, idx: usize) -> TensorId {
        self.ids[idx].expect("entry is not bound to the tape")
    }

    /// Adds the tape gradients of trainable leaves into the store.
    pub fn harvest<E: Elem>(&self, tape: &Tape<E>, store: &mut ParamStore<E>) {
        for (idx, id) in self.ids.iter().enumerate() {
            let Some(id) = id else { continue };
            if store.entry(idx).kind != ParamKind::Trainable {
                continue;
            }
            if let Some(g) = tape.grad(*id) {
                let dst = &mut store.entry_mut(idx).grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d = *d + *s;
                }
            }
        }
    }
}

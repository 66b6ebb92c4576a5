//! Named parameter storage shared by the depth and pose networks.
//!
//! Parameters live outside the tape; each forward pass binds them onto a fresh
//! tape as leaves, and the trainer reads gradients back through the same
//! binding. Definition order is deterministic, which keeps optimizer state and
//! checkpoints stable.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::{CcError, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn define(&mut self, name: &str, init: ArrayD<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(CcError::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), init));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f64>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total learnable scalar count, optionally restricted by a name prefix.
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

/// Per-forward-pass binding of store parameters onto a tape.
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    pub fn new(store: &ParamStore) -> Self {
        Binder {
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, t: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = t.leaf(store.value(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients for every bound parameter after `tape.backward`.
    pub fn grads(&self, t: &Tape) -> Vec<(ParamId, ArrayD<f64>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), t.grad(var))))
            .collect()
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}

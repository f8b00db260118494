//! Named parameter tensors with per-tensor frozen flags.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, frozen: bool) {
        self.entries.insert(name.into(), Param { tensor, frozen });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn freeze_all(&mut self) {
        self.entries.values_mut().for_each(|p| p.frozen = true);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers `name` on the graph: trainable tensors as parameters, frozen
    /// ones as constants (so no gradient is ever formed for them).
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        Ok(if p.frozen {
            g.constant(p.tensor.clone())
        } else {
            g.param(name, p.tensor.clone())
        })
    }

    /// Registers `name` if present.
    pub fn var_opt(&self, g: &mut Graph<T>, name: &str) -> Result<Option<Var>> {
        if self.contains(name) {
            self.var(g, name).map(Some)
        } else {
            Ok(None)
        }
    }
}

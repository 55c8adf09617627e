//! Named parameter storage shared between model components.
//!
//! Parameters live outside any graph; each training step copies the current
//! values into a fresh [`Graph`](crate::graph::Graph) as named leaves and
//! applies gradient updates back to the store afterwards.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::graph::{Graph, VarId};
use crate::rng::seeded_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Ordered map of named parameters. Iteration order is the sorted name
/// order, which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>, trainable: bool) {
        self.entries
            .insert(name.to_string(), ParamEntry { value, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(e) = self.entries.get_mut(name) {
            e.trainable = trainable;
        }
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Bind the parameter as a named leaf in `graph`. Repeat bindings of the
    /// same name return the same node, so shared weights accumulate
    /// gradients correctly.
    pub fn bind(&self, graph: &mut Graph, name: &str) -> VarId {
        let entry = self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not found in store"));
        graph.named_leaf(name, entry.value.clone())
    }

    /// Insert a parameter if absent, initialized by `init`.
    pub fn get_or_init(
        &mut self,
        name: &str,
        trainable: bool,
        init: impl FnOnce() -> Array2<f64>,
    ) -> &Array2<f64> {
        if !self.entries.contains_key(name) {
            let value = init();
            self.insert(name, value, trainable);
        }
        &self.entries[name].value
    }

    /// Copy values from `other` into entries of the same name, keeping this
    /// store's trainable flags. Returns how many entries were overwritten;
    /// names absent here are skipped (the caller decides whether that is
    /// worth reporting). A shape mismatch errors: it means the weights were
    /// exported for a different architecture.
    pub fn apply_overrides(&mut self, other: &ParamStore) -> crate::error::Result<usize> {
        let mut applied = 0;
        for (name, incoming) in other.iter() {
            if let Some(entry) = self.entries.get_mut(name) {
                if entry.value.dim() != incoming.value.dim() {
                    return Err(crate::error::Error::Shape(format!(
                        "override for {name:?} has shape {:?}, store holds {:?}",
                        incoming.value.dim(),
                        entry.value.dim()
                    )));
                }
                entry.value = incoming.value.clone();
                applied += 1;
            }
        }
        Ok(applied)
    }
}

/// Xavier-uniform initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
/// The stream is derived from `(seed, name)`, so each parameter gets an
/// independent, reproducible stream regardless of creation order.
pub fn xavier_uniform(seed: u64, name: &str, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = seeded_rng(seed, name);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}

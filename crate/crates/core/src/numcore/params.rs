use std::collections::BTreeMap;

use super::array::Array;
use crate::error::{Error, Result};

/// Which side of the meta-learning split a parameter lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    /// Adapted per task in the inner loop.
    Adapted,
    /// Shared across tasks; only the outer loop moves it.
    Shared,
}

impl Partition {
    pub fn to_byte(self) -> u8 {
        match self {
            Partition::Adapted => 0,
            Partition::Shared => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Partition::Adapted),
            1 => Ok(Partition::Shared),
            other => Err(Error::Format(format!("unknown partition label {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Array,
    pub partition: Partition,
}

/// Named parameters, kept in name order so iteration and serialization are stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array, partition: Partition) {
        self.entries
            .insert(name.into(), Parameter { value, partition });
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Copy of the entries carrying `partition`.
    pub fn subset(&self, partition: Partition) -> ParameterStore {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| p.partition == partition)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites values of every entry present in `other`.
    pub fn overlay(&mut self, other: &ParameterStore) {
        for (name, p) in &other.entries {
            self.entries.insert(name.clone(), p.clone());
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// `self -= rate * grads` for every entry that has a gradient.
    pub fn descend(&mut self, grads: &GradientMap, rate: f64) {
        for (name, p) in self.entries.iter_mut() {
            if let Some(g) = grads.get(name) {
                p.value.axpy(-rate, g);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }
}

/// Parameter name to gradient of identical shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, Array>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero gradient for every entry of `store`.
    pub fn zeros_like(store: &ParameterStore) -> Self {
        GradientMap {
            entries: store
                .iter()
                .map(|(k, p)| (k.clone(), Array::zeros(p.value.shape())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Array) {
        self.entries.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` into `self`; names missing here are inserted.
    pub fn accumulate(&mut self, other: &GradientMap) {
        for (name, g) in &other.entries {
            match self.entries.get_mut(name) {
                Some(mine) => mine.axpy(1.0, g),
                None => {
                    self.entries.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn dot(&self, other: &GradientMap) -> f64 {
        self.entries
            .iter()
            .filter_map(|(k, g)| other.get(k).map(|h| super::array::dot(g.data(), h.data())))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Array::is_finite)
    }
}

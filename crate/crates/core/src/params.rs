//! Named trainable tensors with gradient slots.
//!
//! Names may alias another entry; an alias resolves to the same storage slot,
//! so a graph that reads both names accumulates into a single gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
    aliases: BTreeMap<String, String>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) || self.aliases.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, Param { value, grad });
        Ok(())
    }

    /// Make `alias` refer to the storage of `target`.
    pub fn alias(&mut self, alias: impl Into<String>, target: &str) -> Result<()> {
        let alias = alias.into();
        let target = self.resolve(target)?.to_string();
        if self.entries.contains_key(&alias) || self.aliases.contains_key(&alias) {
            return Err(Error::Config(format!("duplicate parameter `{alias}`")));
        }
        self.aliases.insert(alias, target);
        Ok(())
    }

    /// Canonical storage name for `name`.
    pub fn resolve<'a>(&'a self, name: &'a str) -> Result<&'a str> {
        if let Some((k, _)) = self.entries.get_key_value(name) {
            return Ok(k);
        }
        self.aliases
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn same_storage(&self, a: &str, b: &str) -> bool {
        matches!((self.resolve(a), self.resolve(b)), (Ok(x), Ok(y)) if x == y)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        let key = self.resolve(name)?;
        Ok(&self.entries[key])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let key = self.resolve(name)?.to_string();
        Ok(self.entries.get_mut(&key).expect("resolved name"))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.resolve(name).is_ok()
    }

    /// Storage names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn aliases(&self) -> impl Iterator<Item = (&str, &str)> {
        self.aliases.iter().map(|(a, t)| (a.as_str(), t.as_str()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of storage slots (aliases excluded).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trainable scalars, each sharing group counted once.
    pub fn count_params(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, pa), (b, pb))| a == b && pa.value.shape() == pb.value.shape())
    }
}

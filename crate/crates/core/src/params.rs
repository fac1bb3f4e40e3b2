//! Registry of named trainable parameters.
//!
//! A shared kernel is stored once; every layer that uses it refers to it by
//! name. Each call to [`crate::graph::Graph::param`] is one use-site and the
//! gradients of all use-sites are summed into the single entry on backward.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    /// Reporting group, e.g. `W_bn_3` for both `W_bn_3.gamma` and `W_bn_3.beta`.
    pub group: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
    use_count: IndexMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Spec(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name.to_string(),
            Param {
                tensor,
                group: group.to_string(),
            },
        );
        self.use_count.insert(name.to_string(), 0);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn group_of(&self, name: &str) -> Option<&str> {
        self.entries.get(name).map(|p| p.group.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Use-sites recorded since the last [`ParamStore::reset_use_counts`].
    pub fn use_count(&self, name: &str) -> usize {
        self.use_count.get(name).copied().unwrap_or(0)
    }

    pub(crate) fn record_use(&mut self, name: &str) -> Result<()> {
        match self.use_count.get_mut(name) {
            Some(c) => {
                *c += 1;
                Ok(())
            }
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn reset_use_counts(&mut self) {
        self.use_count.values_mut().for_each(|c| *c = 0);
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.clear_grad();
        }
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }
}

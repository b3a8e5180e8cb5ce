use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named collection of trainable tensors.
///
/// Names are slash-separated paths (`policy/w1/weight`). Iteration order is
/// lexicographic so every traversal is deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
    pub rng_seed: u64,
}

impl ParameterSet {
    pub fn new(rng_seed: u64) -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if !tensor.is_finite() {
            return Err(Error::contract(format!("parameter `{name}` has non-finite entries")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not registered")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not registered")))
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.tensors.keys().filter(move |k| k.starts_with(prefix))
    }

    /// Copies every tensor under `prefix` into a new set.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            rng_seed: self.rng_seed,
        }
    }

    /// Overwrites entries with those of `other`.
    pub fn merge(&mut self, other: ParameterSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copies every `from/...` tensor to `to/...`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), v.clone())))
            .collect();
        self.tensors.extend(copies);
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    init_range(rng, shape, bound)
}

pub fn init_range(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
    t
}

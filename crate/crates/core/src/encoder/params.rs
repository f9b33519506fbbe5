use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::{Bindings, Tensor};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Architecture(vec![format!("missing tensor `{name}`")]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Copies every tensor under `prefix` into this set.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.0 {
            self.0.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        )
    }

    /// A zero tensor for every parameter.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims())))
                .collect(),
        )
    }

    /// Names whose shapes differ from (or are absent in) `other`.
    pub fn shape_mismatches(&self, other: &ParamSet) -> Vec<String> {
        let mut bad = Vec::new();
        for (k, v) in &self.0 {
            match other.0.get(k) {
                None => bad.push(format!("`{k}` missing")),
                Some(o) if o.dims() != v.dims() => {
                    bad.push(format!("`{k}` {:?} vs {:?}", v.dims(), o.dims()))
                }
                _ => {}
            }
        }
        for k in other.0.keys() {
            if !self.0.contains_key(k) {
                bad.push(format!("`{k}` unexpected"));
            }
        }
        bad
    }

    /// L2 distance between two shape-identical sets.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.0
            .iter()
            .map(|(k, v)| {
                let o = &other.0[k];
                v.data()
                    .iter()
                    .zip(o.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

impl From<BTreeMap<String, Tensor>> for ParamSet {
    fn from(m: BTreeMap<String, Tensor>) -> Self {
        Self(m)
    }
}

impl Bindings for ParamSet {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

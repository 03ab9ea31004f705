//! Named parameter arrays and their binding into a graph.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Array, Graph, Tensor};

/// Ordered collection of named arrays. Insertion order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Array)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Appends every entry of `other`, prefixing names with `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (name, a) in other.iter() {
            self.insert(format!("{prefix}{name}"), a.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, a) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, a.clone());
            }
        }
        out
    }

    /// Fails with every differing name and shape when `self` does not have
    /// exactly the layout of `reference`.
    pub fn check_layout(&self, reference: &ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        for (name, a) in reference.iter() {
            match self.get(name) {
                None => problems.push(format!("{name}: missing, expected {:?}", a.shape())),
                Some(b) if b.shape() != a.shape() => problems.push(format!(
                    "{name}: found {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )),
                Some(_) => {}
            }
        }
        for (name, b) in self.iter() {
            if reference.get(name).is_none() {
                problems.push(format!("{name}: unexpected {:?}", b.shape()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "architecture mismatch: {}",
                problems.join("; ")
            )))
        }
    }

    /// Registers every array as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let mut tensors = BTreeMap::new();
        for (name, a) in self.iter() {
            tensors.insert(name.to_string(), g.param(a.clone())?);
        }
        Ok(Bound { tensors })
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    tensors: BTreeMap<String, Tensor>,
}

impl Bound {
    /// Binds names to already-created tensors.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self {
            tensors: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Tensor)> {
        self.tensors.iter().map(|(n, &t)| (n.as_str(), t))
    }

    /// View of the entries under `prefix`, with the prefix removed.
    pub fn scoped(&self, prefix: &str) -> Bound {
        Bound {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(n, &t)| n.strip_prefix(prefix).map(|r| (r.to_string(), t)))
                .collect(),
        }
    }
}

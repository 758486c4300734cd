use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use super::dense::Tensor;
use crate::error::{Error, Result};

/// Named learnable tensors plus the set of paths excluded from updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

/// `pattern` matches `name` itself or anything below it in the dotted path.
pub fn path_matches(pattern: &str, name: &str) -> bool {
    name == pattern
        || (name.len() > pattern.len() && name.starts_with(pattern) && name.as_bytes()[pattern.len()] == b'.')
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Consistency(format!("duplicate parameter '{name}'")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
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

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn freeze(&mut self, name: &str) {
        if self.tensors.contains_key(name) {
            self.frozen.insert(name.to_string());
        }
    }

    /// Replace the frozen set with every parameter matched by a pattern.
    pub fn set_frozen_patterns<S: AsRef<str>>(&mut self, patterns: &[S]) {
        self.frozen = self
            .tensors
            .keys()
            .filter(|n| patterns.iter().any(|p| path_matches(p.as_ref(), n)))
            .cloned()
            .collect();
    }

    /// Freeze everything not matched by one of `trainable`.
    pub fn set_trainable_patterns<S: AsRef<str>>(&mut self, trainable: &[S]) {
        self.frozen = self
            .tensors
            .keys()
            .filter(|n| !trainable.iter().any(|p| path_matches(p.as_ref(), n)))
            .cloned()
            .collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .cloned()
            .collect()
    }

    /// Hash of the exact bit pattern of one parameter.
    pub fn fingerprint(&self, name: &str) -> Option<u64> {
        let t = self.tensors.get(name)?;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
        Some(h.finish())
    }

    pub fn fingerprints(&self) -> BTreeMap<String, u64> {
        self.tensors
            .keys()
            .map(|n| (n.clone(), self.fingerprint(n).expect("present")))
            .collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (n, t) in &self.tensors {
            t.check_finite(n)?;
        }
        Ok(())
    }
}

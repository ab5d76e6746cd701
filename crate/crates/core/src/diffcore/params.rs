use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors keyed by dot-separated path.
///
/// Backed by a `BTreeMap`, so iteration is lexicographic and therefore
/// deterministic across runs and platforms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new parameter. Paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::Contract(format!("duplicate parameter path {path}")));
        }
        self.tensors.insert(path, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter path {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter path {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn paths_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.tensors.keys().filter(move |p| p.starts_with(prefix))
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.set_grad(None);
        }
    }

    /// FNV-1a over paths, shapes and raw value bits. Used to assert that a
    /// code path left the parameters untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (path, t) in &self.tensors {
            feed(path.as_bytes());
            for d in t.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

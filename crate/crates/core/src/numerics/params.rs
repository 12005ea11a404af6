use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Named model parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Missing {
            what: "parameter",
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Missing {
            what: "parameter",
            name: name.to_string(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Excludes a parameter from optimizer updates.
    pub fn freeze(&mut self, name: &str) -> Result<()> {
        self.get(name)?;
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Copies every parameter whose name starts with `prefix` from `other`,
    /// checking shapes. Returns the number of tensors copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, src) in other.tensors.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let dst = self.get_mut(name)?;
            if dst.shape() != src.shape() {
                return Err(Error::shape("copy_prefix_from", dst.shape(), src.shape()));
            }
            *dst = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Bitwise equality of every tensor whose name starts with `prefix`.
    pub fn prefix_bit_eq(&self, other: &ParamStore, prefix: &str) -> bool {
        let mine: Vec<_> = self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        let theirs: Vec<_> = other.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        mine.len() == theirs.len()
            && mine
                .iter()
                .zip(&theirs)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

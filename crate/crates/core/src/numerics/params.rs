use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named learnable tensors in registration order.
///
/// The order is stable and is the order used by checkpoints and gradient
/// reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every tensor whose name starts with `from` to the same name
    /// with `from` replaced by `to`. Used to build weight-tied twins.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> Result<()> {
        let copies: Vec<(String, Tensor<T>)> = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), v.clone())))
            .collect();
        for (name, value) in copies {
            let slot = self.get_mut(&name)?;
            if slot.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "copy_prefix",
                    left: slot.shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            *slot = value;
        }
        Ok(())
    }
}

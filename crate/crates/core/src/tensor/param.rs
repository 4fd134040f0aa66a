use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Which optimizer owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Network weights `w`.
    Weight,
    /// Architecture logits (operator and path choices).
    Arch,
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone)]
struct Buffer<T> {
    name: String,
    tensor: Tensor<T>,
}

/// Owns every parameter and buffer of a network, addressed by id or by a
/// unique dotted name.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, Entry>,
}

#[derive(Debug, Clone, Copy)]
enum Entry {
    Param(ParamId),
    Buffer(BufferId),
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str, entry: Entry) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        self.names.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        let id = ParamId(self.params.len());
        self.claim(&name, Entry::Param(id))?;
        self.params.push(Parameter {
            name,
            tensor: tensor.with_grad(true),
            group,
        });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        let id = BufferId(self.buffers.len());
        self.claim(&name, Entry::Buffer(id))?;
        self.buffers.push(Buffer { name, tensor });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].tensor
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffers[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.params[id.0].group == group).collect()
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Entry::Param(id)) => Some(*id),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Entry::Buffer(id)) => Some(*id),
            _ => None,
        }
    }

    /// Number of trainable scalars in `group` (all groups if `None`).
    pub fn num_scalars(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Named view of every parameter and buffer, parameters first.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.tensor))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.tensor)))
            .collect()
    }

    /// Overwrites a parameter or buffer by name; the shape must match.
    pub fn assign(&mut self, name: &str, value: &Tensor<T>) -> Result<()> {
        let target = match self.names.get(name) {
            Some(Entry::Param(id)) => &mut self.params[id.0].tensor,
            Some(Entry::Buffer(id)) => &mut self.buffers[id.0].tensor,
            None => return Err(Error::UnknownParam(name.to_string())),
        };
        if target.shape() != value.shape() {
            return Err(Error::shape(format!(
                "`{name}`: stored {:?}, assigned {:?}",
                target.shape(),
                value.shape()
            )));
        }
        target.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Looks up a parameter or buffer by name.
    pub fn tensor_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        match self.names.get(name)? {
            Entry::Param(id) => Some(&self.params[id.0].tensor),
            Entry::Buffer(id) => Some(&self.buffers[id.0].tensor),
        }
    }

    /// Copies every entry of `self` whose name also exists in `source`.
    /// Returns the number of entries copied.
    pub fn copy_matching_from(&mut self, source: &ParamStore<T>) -> Result<usize> {
        let names: Vec<String> = self.names.keys().cloned().collect();
        let mut copied = 0;
        for name in names {
            if let Some(t) = source.tensor_by_name(&name) {
                self.assign(&name, t)?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_across_params_and_buffers() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[2]), ParamGroup::Weight).unwrap();
        assert!(matches!(
            s.add_buffer("a", Tensor::zeros(&[2])),
            Err(Error::DuplicateName(_))
        ));
        s.add("b", Tensor::zeros(&[3]), ParamGroup::Arch).unwrap();
        assert_eq!(s.num_scalars(None), 5);
        assert_eq!(s.num_scalars(Some(ParamGroup::Arch)), 3);
        assert_eq!(s.ids_in(ParamGroup::Weight), vec![ParamId(0)]);
    }

    #[test]
    fn assign_checks_shape() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[2, 2]), ParamGroup::Weight).unwrap();
        assert!(s.assign("w", &Tensor::ones(&[4])).is_err());
        s.assign("w", &Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(s.get(ParamId(0)).sum(), 4.0);
        assert!(matches!(s.assign("nope", &Tensor::ones(&[1])), Err(Error::UnknownParam(_))));
    }
}

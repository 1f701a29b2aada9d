use std::collections::HashMap;
use std::ops::Index;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stable handle to one named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// manifest order used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let old = &self.tensors[id.0];
        if old.shape() != tensor.shape() {
            return Err(Error::shape("ParamStore::set", old.shape(), tensor.shape()));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// `(name, shape)` pairs in manifest order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| graph.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams { vars }
    }
}

/// Graph variables for a [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Gradient per parameter in manifest order (zeros when unreached).
    pub fn gradients(&self, graph: &Graph, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
            })
            .collect()
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for BoundParams {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_of_weight_and_bias() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[3, 3])).unwrap();
        store.insert("b", Tensor::zeros(&[3])).unwrap();
        assert_eq!(store.param_count(), 12);
        assert_eq!(store.manifest()[0], ("w".to_string(), vec![3, 3]));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn set_keeps_shape() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.set(id, Tensor::zeros(&[3])).is_err());
        store.set(id, Tensor::ones(&[2])).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, 1.0]);
    }
}

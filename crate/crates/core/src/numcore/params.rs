use std::collections::HashMap;
use std::sync::Arc;

use super::{Gradients, Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors. Insertion order is the canonical order used by
/// checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        self.insert(name, rng.normal_tensor(shape, std))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: self.values[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Records every parameter as a leaf of `graph`; `trainable` decides which ones
    /// receive gradients.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: impl Fn(&str) -> bool) -> Bound<'g> {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| graph.leaf((**v).clone(), trainable(name)))
            .collect();
        Bound { vars }
    }

    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        self.bind(graph, |_| false)
    }
}

/// Parameters recorded in one graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order; `None` for parameters without one.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

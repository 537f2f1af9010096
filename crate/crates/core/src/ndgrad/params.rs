use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named, ordered collection of model tensors. Buffers (running statistics)
/// live alongside parameters but are never handed to the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Mutable access to several tensors at once; `ids` must be strictly
    /// increasing.
    pub fn tensors_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        assert!(ids.windows(2).all(|w| w[0].0 < w[1].0), "ids must be strictly increasing");
        let mut want = ids.iter().peekable();
        let mut out = Vec::with_capacity(ids.len());
        for (i, e) in self.entries.iter_mut().enumerate() {
            if want.peek().is_some_and(|id| id.0 == i) {
                want.next();
                out.push(&mut e.value);
            }
        }
        out
    }

    /// Overwrites a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{}: {:?} vs {:?}", entry.name, entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    /// Puts every tensor on `graph` as a leaf. Trainable tensors accepted by
    /// `differentiate` become differentiable; everything else is constant.
    pub fn bind(&self, graph: &mut Graph, differentiate: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let grad = e.trainable && differentiate(&e.name);
                graph.leaf(e.value.clone(), grad)
            })
            .collect();
        Bound { vars }
    }

    /// Binds everything as constants except `id`, which is replaced by `var`.
    pub fn bind_with(&self, graph: &mut Graph, id: ParamId, var: Var) -> Bound {
        let mut bound = self.bind(graph, |_| false);
        bound.vars[id.0] = var;
        bound
    }
}

/// Graph leaves of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

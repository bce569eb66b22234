use std::collections::{BTreeMap, HashMap};

use super::{RngStream, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen parameters still participate in forward passes but are never updated.
    pub trainable: bool,
}

/// Anything that owns parameters in a [`ParamStore`].
pub trait Parameterized {
    fn param_ids(&self) -> Vec<ParamId>;

    fn param_count(&self, store: &ParamStore) -> usize {
        store.numel(&self.param_ids())
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
pub type Gradients = BTreeMap<ParamId, Tensor>;

/// Named parameter collection. Insertion order is preserved and defines the
/// serialization order of checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    /// Weight matrix `[d_in, d_out]` drawn uniform in `±1/√d_in`.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rng: &mut RngStream,
        trainable: bool,
    ) -> Result<ParamId> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let t = rng.uniform_tensor([d_in, d_out], -bound, bound);
        self.add(name, t, trainable)
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        trainable: bool,
    ) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape), trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.tensor(id).numel()).sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Plain gradient-descent update. Frozen parameters are skipped.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (&id, g) in grads {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            if g.shape() != p.tensor.shape() {
                return Err(Error::dim("sgd_step", p.tensor.shape(), g.shape()));
            }
            for (w, &d) in p.tensor.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }

    /// Overwrites parameter values by name. Every entry must name an existing
    /// parameter of identical shape.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            let slot = self.tensor_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::dim("load_values", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        Ok(())
    }
}

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::tape::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    frozen: bool,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Named parameters with gradient accumulators and a per-parameter freeze bit.
///
/// Names are dotted paths (`llm.h0.attn.wq`); the leading segment identifies
/// the parameter group, which is how whole sub-models are frozen, hashed and
/// checkpointed.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.clone(),
            value,
            grad,
            frozen: false,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Sets the freeze bit on every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.frozen = frozen;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.name(id).starts_with(prefix))
            .collect()
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_frozen(id)).collect()
    }

    pub fn num_elements(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix)
            .into_iter()
            .map(|id| self.value(id).numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the parameter gradients of one backward pass into the accumulators.
    /// Frozen parameters are skipped.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += v;
            }
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Copies values from `tensors` into the parameters of the same name.
    /// Nothing is written unless every name and shape matches.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut ids = Vec::with_capacity(tensors.len());
        for (name, t) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let have = self.value(id).shape();
            if have != t.shape() {
                return Err(Error::shape("load_named", have, t.shape()));
            }
            ids.push(id);
        }
        for (id, (_, t)) in ids.into_iter().zip(tensors) {
            self.set_value(id, t.clone())?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of every parameter
    /// under `prefix`, in registration order.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            hasher.update((p.name.len() as u32).to_le_bytes());
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::zeros([1, 1])).unwrap();
        assert!(store.register("a", Tensor::zeros([1, 1])).is_err());
    }

    #[test]
    fn prefix_freeze_and_checksum() {
        let mut store = ParamStore::new();
        let a = store.register("llm.a", Tensor::ones([2, 2])).unwrap();
        let b = store.register("adapter.b", Tensor::ones([2, 2])).unwrap();
        store.set_frozen_prefix("llm.", true);
        assert!(store.is_frozen(a));
        assert!(!store.is_frozen(b));
        assert_eq!(store.trainable(), vec![b]);

        let before = store.checksum("llm.");
        store.set_value(b, Tensor::zeros([2, 2])).unwrap();
        assert_eq!(before, store.checksum("llm."));
        store.set_value(a, Tensor::zeros([2, 2])).unwrap();
        assert_ne!(before, store.checksum("llm."));
    }
}

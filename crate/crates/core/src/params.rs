//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// What a parameter is, used by the trainable/frozen partition and by the
/// parameter-count oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Pretrained-model weight; frozen unless fully finetuning.
    Base,
    /// Directly learnt adapter weight matrix.
    AdapterWeight,
    /// Directly learnt adapter bias.
    AdapterBias,
    /// Weight matrix of the pooling MLP.
    PoolWeight,
    PoolBias,
    /// Hypernetwork input layer weight.
    HyperInput,
    /// Hypernetwork output head weight (generates adapter weights/biases).
    HyperHead,
    /// Bias inside the hypernetwork (`b_0` and head biases).
    HyperBias,
    LayerEmbedding,
    TaskEmbedding,
    /// Anything trained on top of a frozen model for analysis.
    Probe,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    kind: ParamKind,
    tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invariant(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, kind, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Overwrites the values of `id`, keeping its gradient flag.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.tensor.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "cannot assign {:?} to parameter `{}` of shape {:?}",
                value.shape(),
                entry.name,
                entry.tensor.shape()
            )));
        }
        let slot = &mut entry.tensor;
        let rg = slot.requires_grad();
        *slot = value.with_requires_grad(rg);
        Ok(())
    }

    /// Records `id` on the tape (once per tape).
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.bind(id.0, &self.entries[id.0].tensor)
    }

    /// Moves gradients from the tape's bound leaves into the stored tensors.
    /// Frozen tensors are skipped.
    pub fn pull_grads(&mut self, tape: &Tape) {
        for &(key, var) in tape.bindings() {
            if let Some(g) = tape.grad(var) {
                self.entries[key].tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn set_requires_grad_where(&mut self, mut pred: impl FnMut(&str, ParamKind) -> bool) {
        for e in &mut self.entries {
            let rg = pred(&e.name, e.kind);
            e.tensor.set_requires_grad(rg);
        }
    }

    pub fn numel_where(&self, mut pred: impl FnMut(&str, ParamKind) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(&e.name, e.kind))
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Values of every parameter, in insertion order.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| {
                let t = Tensor::new(e.tensor.shape(), e.tensor.data().to_vec()).unwrap();
                (e.name.clone(), t)
            })
            .collect()
    }

    /// Loads values by name; every stored parameter must be present with
    /// the same shape.
    pub fn restore(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = values.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            self.set(ParamId(i), (*t).clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", ParamKind::Base, Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", ParamKind::Base, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn pull_grads_skips_frozen() {
        let mut s = ParamStore::new();
        let a = s.insert("a", ParamKind::Base, Tensor::full(&[2], 1.0)).unwrap();
        let b = s
            .insert("b", ParamKind::AdapterWeight, Tensor::full(&[2], 2.0).with_requires_grad(true))
            .unwrap();
        let mut tape = Tape::new();
        let va = s.bind(&mut tape, a);
        let vb = s.bind(&mut tape, b);
        assert_eq!(s.bind(&mut tape, b), vb);
        let p = tape.mul(va, vb).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        s.pull_grads(&tape);
        assert!(s.get(a).grad().is_none());
        assert_eq!(s.get(b).grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn restore_requires_matching_shapes() {
        let mut s = ParamStore::new();
        s.insert("w", ParamKind::Base, Tensor::zeros(&[2, 2])).unwrap();
        let snap = s.snapshot();
        s.restore(&snap).unwrap();
        let bad = vec![("w".to_string(), Tensor::zeros(&[4]))];
        assert!(s.restore(&bad).is_err());
        assert!(s.restore(&[]).is_err());
    }
}

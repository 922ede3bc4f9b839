//! Named parameter storage and per-forward graph binding.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether AdamW applies weight decay (false for norms and biases).
    pub decay: bool,
}

/// Parameters in a fixed registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        tensor.round_to_f32();
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor: tensor.with_requires_grad(true), decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Replaces the tensor behind `name`, keeping its shape contract.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = *self.by_name.get(name).ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        if self.params[i].tensor.shape() != tensor.shape() {
            return Err(Error::shape(
                "ParamStore::replace",
                format!("{name}: {:?} vs {:?}", self.params[i].tensor.shape(), tensor.shape()),
            ));
        }
        self.params[i].tensor = tensor.with_requires_grad(true);
        Ok(())
    }
}

/// Dense gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Grads { data: store.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn all(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().flatten().for_each(|x| *x *= c);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// A tape plus lazily bound parameter leaves for one forward pass.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { tape: Tape::new(), store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.tape.param(self.store.get(id))?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Runs backward from `loss` and gathers parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        self.tape.backward(loss)?;
        let mut grads = Grads::zeros(self.store);
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.tape.grad(v)) {
                grads.data[i].copy_from_slice(g);
            }
        }
        Ok(grads)
    }
}

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, uniquely named collection of learnable tensors.
///
/// Layers hold [`ParamId`]s into a store rather than tensors, so one store
/// can be bound onto many graphs, updated by an optimizer and serialized by
/// name.
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

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` init from a stream keyed by `name`,
    /// so values do not depend on creation order.
    pub fn init_uniform(&mut self, seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut rng = Rng::named(seed, name);
        self.insert(name, Tensor::uniform(shape.to_vec(), bound, &mut rng))
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-receiving leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        Binding(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Binds every parameter as a constant except the listed ids, which are
    /// routed to caller-supplied vars (used to differentiate a subset).
    pub fn bind_overriding(&self, g: &mut Graph, overrides: &[(ParamId, Var)]) -> Binding {
        let mut b = self.bind_frozen(g);
        for &(id, v) in overrides {
            b.0[id.0] = v;
        }
        b
    }
}

/// The vars a [`ParamStore`] was bound to on one graph.
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    /// Binding over vars already on a graph, one per store entry in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradients in store order; parameters that did not reach the loss get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.0.iter().map(|&v| g.grad_tensor(v)).collect()
    }

    /// Adds `scale · grad` into `acc` without materializing intermediate tensors.
    pub fn accumulate_grads(&self, g: &Graph, acc: &mut [Vec<f32>], scale: f32) {
        for (buf, &v) in acc.iter_mut().zip(&self.0) {
            if let Some(gr) = g.grad(v) {
                buf.iter_mut().zip(gr).for_each(|(a, b)| *a += scale * b);
            }
        }
    }
}

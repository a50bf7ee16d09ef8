use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Gradients, Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learning-rate group. Every parameter belongs to exactly one.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub learning_rate: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: usize,
    pub value: Tensor<T>,
}

/// Owns every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    groups: Vec<ParamGroup>,
    params: Vec<Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            groups: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Registers a group (or returns the existing one with that name).
    pub fn group(&mut self, name: &str, learning_rate: f32) -> usize {
        if let Some(i) = self.groups.iter().position(|g| g.name == name) {
            return i;
        }
        self.groups.push(ParamGroup {
            name: name.to_string(),
            learning_rate,
        });
        self.groups.len() - 1
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn set_learning_rate(&mut self, group: &str, lr: f32) -> bool {
        match self.groups.iter_mut().find(|g| g.name == group) {
            Some(g) => {
                g.learning_rate = lr;
                true
            }
            None => false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: usize, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        assert!(group < self.groups.len(), "unknown parameter group");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            groups: self.groups.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Loads every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            nodes: self
                .params
                .iter()
                .map(|p| g.param(p.value.clone()))
                .collect(),
        }
    }

    /// Loads every parameter as a constant (inference, no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            nodes: self
                .params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        }
    }
}

/// Graph nodes standing in for a [`ParamStore`]'s tensors.
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Per-parameter gradients in store order.
    pub fn grads<T: Real>(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.nodes.iter().map(|&n| grads.take(n)).collect()
    }
}

/// Truncated normal (±2σ) initialization.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

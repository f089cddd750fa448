use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalization scale/shift.
    Norm,
    /// Non-learned state such as running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Named collection of learnable weights and buffers, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Kaiming-uniform for ReLU nets: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter; values are drawn in f64 so that f32 and f64
    /// stores built from the same seed agree up to rounding.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let value = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)))
            }
        };
        self.insert(Parameter {
            grad: Tensor::zeros(shape.to_vec()),
            name,
            value,
            trainable: kind != ParamKind::Buffer,
            kind,
        })
    }

    pub fn insert(&mut self, p: Parameter<T>) -> ParamId {
        let id = ParamId(self.params.len());
        self.by_name.insert(p.name.clone(), id);
        self.params.push(p);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for p in &mut self.params {
            if p.kind != ParamKind::Buffer && pred(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    /// Adds gradients produced by [`Session::backward`] into `Parameter::grad`.
    pub fn accumulate(&mut self, grads: ParamGrads<T>) {
        for (p, g) in self.params.iter_mut().zip(grads.0) {
            if let Some(g) = g {
                let data = p.grad.data().iter().zip(g.data()).map(|(&a, &b)| a + b).collect();
                p.grad = Tensor::from_parts(p.value.shape().to_vec(), data);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                    kind: p.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-parameter gradients indexed like the store they came from.
#[derive(Clone, Debug)]
pub struct ParamGrads<T>(pub Vec<Option<Tensor<T>>>);

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }
}

/// A pending running-statistics update produced by a training-mode forward.
#[derive(Clone, Debug)]
pub struct BufferUpdate<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
}

/// One forward pass: a fresh graph bound to a read-only parameter store.
pub struct Session<'p, T> {
    pub graph: Graph<T>,
    store: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    updates: Vec<BufferUpdate<T>>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(store: &'p ParamStore<T>, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            bound: vec![None; store.len()],
            store,
            train,
            updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// The graph node of a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        &self.store.get(id).value
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.updates.push(BufferUpdate { id, value });
    }

    pub fn take_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.updates)
    }

    /// Gradients of `loss` for every parameter used in this session.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>, NumericsError> {
        let mut grads = self.graph.backward(loss)?;
        let per_param = self
            .bound
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect();
        Ok(ParamGrads(per_param))
    }
}

pub fn apply_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<BufferUpdate<T>>) {
    for u in updates {
        store.get_mut(u.id).value = u.value;
    }
}

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of `f32` parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names, which is always a
    /// model-construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    /// Kaiming-uniform weight, `bound = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound));
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: f32) -> ParamId {
        self.insert(name, Tensor::full(shape.to_vec(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter `{name}`")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_params",
                    lhs: dst.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *dst = t.clone();
        }
        if other.len() != self.len() {
            return Err(TensorError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// Binds store parameters into one graph as leaves, once each.
pub struct Binder<'p, T: Real> {
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
    _marker: std::marker::PhantomData<T>,
}

impl<'p, T: Real> Binder<'p, T> {
    pub fn new(store: &'p ParamStore, trainable: bool) -> Self {
        Self {
            store,
            bound: vec![None; store.len()],
            trainable,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn frozen(store: &'p ParamStore) -> Self {
        Self::new(store, false)
    }

    pub fn bind(&mut self, g: &Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = g.leaf(self.store.get(id).cast(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Per-parameter gradients in store order (`None` for unused ones).
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors plus the seed they were initialised from.
///
/// Names are unique and iterate in lexicographic order, which fixes the
/// serialization order and every per-parameter loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

/// Graph leaves for every parameter of a store, keyed by name.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Glorot-uniform matrix: entries in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), graph.param(t.clone())))
            .collect();
        Bindings { vars }
    }

    /// Plain SGD: `p <- p - lr * grad`.
    pub fn sgd_step(&mut self, graph: &Graph, bindings: &Bindings, lr: f64) -> Result<()> {
        for (name, var) in bindings.iter() {
            let grad = graph.grad(var);
            let param = self.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::dim("sgd_step", format!("`{name}` changed shape")));
            }
            for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn shape_of(&self, name: &str) -> Result<Shape> {
        self.get(name).map(Tensor::shape)
    }
}

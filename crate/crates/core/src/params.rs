//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered map from parameter name to tensor. Iteration order is the name
/// order, which fixes the layout used by the optimizer and checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Structure(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Structure(format!("missing parameter {name}")))
    }

    /// Replaces an existing tensor, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(Error::shape("set_param", format!("{name}: {:?} vs {:?}", slot.shape(), t.shape())));
        }
        *slot = t;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Adds every tensor to `g`, as a differentiable leaf when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Gradients from the last backward pass in name order; parameters that
    /// did not reach the loss get zeros.
    pub fn gradients(&self, g: &Graph, bind: &Bindings) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|(k, t)| match bind.vars.get(k).and_then(|&v| g.grad(v)) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }
}

/// Graph handles for every parameter of a store.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Structure(format!("unbound parameter {name}")))
    }
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
    bound: f64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: 0.05,
        }
    }

    pub fn uniform(&mut self, rows: usize, cols: usize) -> Tensor {
        let b = self.bound;
        Tensor::from_fn(rows, cols, |_, _| self.rng.gen_range(-b..b))
    }
}

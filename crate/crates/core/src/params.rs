//! Named parameter collections and their binding into a graph.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Name → tensor map with a stable (sorted) iteration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

pub type Grads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes as `other`.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &other.tensors {
            match self.tensors.get(name) {
                None => return Err(Error::contract(format!("missing parameter `{name}`"))),
                Some(mine) if mine.shape() != t.shape() => {
                    return Err(Error::shape(format!(
                        "parameter `{name}`: expected shape {:?}, found {:?}",
                        mine.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !other.tensors.contains_key(*k)) {
            return Err(Error::contract(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Inserts every tensor as a gradient-carrying leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), graph.param(t.clone())))
                .collect(),
        }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.round_to_f32();
        }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    /// Gradients of every bound parameter after a backward pass (zeros where
    /// the root did not depend on the parameter).
    pub fn grads(&self, graph: &Graph) -> Grads {
        self.vars
            .iter()
            .map(|(k, &v)| (k.to_string(), graph.grad_or_zeros(v)))
            .collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.vars.keys().map(String::as_str).collect()
    }
}

/// Uniform `(−1/√fan_in, 1/√fan_in)` initialization.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / crate::math::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

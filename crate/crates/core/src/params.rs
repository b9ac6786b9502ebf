//! Named parameter tensors, graph binding, and gradient collection.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Scalar, Tensor, Var};

/// Ordered name → tensor map; the order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

/// Per-parameter gradients keyed like [`ParamStore`].
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.map.iter_mut() {
            if name.starts_with(prefix) {
                t.set_requires_grad(trainable);
            }
        }
    }

    /// Copies every parameter under `prefix` from `other`.
    pub fn extend_from(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.map.insert(name.clone(), t.clone());
            }
        }
    }

    /// Registers the parameters under any of `prefixes` as graph leaves.
    pub fn bind(&self, graph: &mut Graph<T>, prefixes: &[&str]) -> Bound {
        let vars = self
            .map
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for bound parameters.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` not bound")))
    }

    /// Gradients of every bound parameter that received one.
    pub fn collect<T: Scalar>(&self, grads: &mut Gradients<T>) -> GradMap<T> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Adds `src` into `dst` entry-wise, inserting missing names.
pub fn accumulate<T: Scalar>(dst: &mut GradMap<T>, src: GradMap<T>) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                dst.insert(name, g);
            }
        }
    }
}

pub fn scale_grads<T: Scalar>(grads: &mut GradMap<T>, s: T) {
    for g in grads.values_mut() {
        g.scale_in_place(s);
    }
}

/// I.i.d. normal tensor, marked trainable.
pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng))).with_grad(true)
}

pub fn zeros<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    Tensor::zeros(shape).with_grad(true)
}

/// He-normal weight for a layer with `fan_in` inputs.
pub fn he<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// LeCun-normal weight (unit-variance preserving for linear maps).
/// `I + N(0, std²)` square matrix, so a fresh linear map starts near the identity.
pub fn near_identity<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Tensor<T> {
    let mut t = normal::<T, R>(rng, vec![n, n], std);
    for i in 0..n {
        t.data_mut()[i * n + i] += T::one();
    }
    t
}

pub fn lecun<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    normal(rng, shape, (1.0 / fan_in as f64).sqrt())
}

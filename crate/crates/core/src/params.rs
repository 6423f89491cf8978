//! Named parameter storage, initialization, and binding onto a graph.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Insertion-ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        let id = self.id(name)?;
        Some(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Places every parameter on `graph` as a gradient-tracking leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self.entries.iter().map(|p| graph.param(p.value.clone())).collect(),
        }
    }

    /// Copies gradients accumulated on `graph` into the store.
    pub fn collect_grads(&mut self, graph: &Graph<T>, bound: &Bound<'_, T>) {
        for (p, &v) in self.entries.iter_mut().zip(&bound.vars) {
            p.grad = graph.grad(v);
        }
    }

    /// Adds gradients accumulated on `graph` onto the stored ones.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bound: &Bound<'_, T>) {
        for (p, &v) in self.entries.iter_mut().zip(&bound.vars) {
            match (&mut p.grad, graph.grad(v)) {
                (Some(acc), Some(g)) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                (slot @ None, g) => *slot = g,
                (Some(_), None) => {}
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    /// Overwrites a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .by_name_mut(name)
            .ok_or_else(|| Error::invalid("param_store", format!("no parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_store",
                format!("`{name}` is {:?}, got {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.entries.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value = Tensor::zeros(p.value.shape().to_vec());
            n += 1;
        }
        n
    }
}

/// Parameters bound to a specific graph, indexed by [`ParamId`].
pub struct Bound<'g, T: Scalar> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Index<ParamId> for Bound<'g, T> {
    type Output = Var<'g, T>;

    fn index(&self, id: ParamId) -> &Var<'g, T> {
        &self.vars[id.0]
    }
}

impl<'g, T: Scalar> Bound<'g, T> {
    /// Binds arbitrary graph values in store order, e.g. perturbed copies.
    pub fn from_vars(vars: Vec<Var<'g, T>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) resampled outside ±2 std.
    TruncNormal(f64),
    /// He normal with the given fan-in.
    Kaiming(usize),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Zeros,
    Ones,
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = numel(shape);
        let data = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => trunc_normal(n, std, rng),
            Init::Kaiming(fan_in) => trunc_normal(n, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
            Init::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        };
        Tensor::from_parts(shape.to_vec(), data)
    }
}

fn trunc_normal(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let value = init.sample(shape, self.rng).cast::<f32>();
        self.store.insert(full, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}

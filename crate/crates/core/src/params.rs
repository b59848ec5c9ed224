//! Named parameter sets, their binding into a [`Graph`], and the optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Parameters keyed by dotted path (`gene.block0.in_proj`). Iteration order is
/// the lexicographic order of the names, which fixes every reduction order
/// that walks the set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
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

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other` into `self`, replacing existing names.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }

    /// Runs a forward pass with every parameter bound as a constant and
    /// returns the value of the resulting variable.
    pub fn evaluate(&self, f: impl FnOnce(&mut Graph, &Bindings) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let v = f(&mut g, &b)?;
        Ok(g.value(v).clone())
    }

    /// Records every parameter as a leaf of `g`; names for which `trainable`
    /// returns false are bound as constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect();
        Bindings { vars }
    }
}

/// Parameter names mapped to their leaves in one graph.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn scope(&self, prefix: &str) -> Scope<'_> {
        Scope {
            bindings: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients of all bound parameters that required them.
    pub fn gradients(&self, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            if let Some(t) = grads.get(v) {
                out.insert(name.clone(), t.clone());
            }
        }
        out
    }
}

/// A view of [`Bindings`] under a name prefix.
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    bindings: &'a Bindings,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.bindings.var(&join(&self.prefix, name))
    }

    /// Like [`Scope::var`] but `None` when the parameter is absent.
    pub fn opt_var(&self, name: &str) -> Option<Var> {
        self.bindings.vars.get(&join(&self.prefix, name)).copied()
    }

    pub fn child(&self, name: &str) -> Scope<'a> {
        Scope {
            bindings: self.bindings,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd",
                    format!("{name}: {:?} vs {:?}", p.shape(), g.shape()),
                ));
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
            p.ensure_finite("sgd")?;
        }
        Ok(())
    }
}

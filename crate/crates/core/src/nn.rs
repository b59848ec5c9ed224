//! Layers shared by the encoders and the decoder, expressed over named
//! parameters: `<name>.w` / `<name>.b` for linear maps, `<name>.gamma` /
//! `<name>.beta` for layer norms.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::{Activation, DEFAULT_LN_EPS};
use crate::params::{join, ParamStore, Scope};
use crate::tensor::Tensor;

pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    bias: bool,
    rng: &mut R,
) {
    store.insert(join(name, "w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    if bias {
        store.insert(join(name, "b"), Tensor::zeros(&[fan_out]));
    }
}

pub(crate) fn init_norm(store: &mut ParamStore, name: &str, width: usize) {
    store.insert(join(name, "gamma"), Tensor::ones(&[width]));
    store.insert(join(name, "beta"), Tensor::zeros(&[width]));
}

/// `x·W (+ b)` for `x[n×in]`.
pub fn linear(g: &mut Graph, p: &Scope<'_>, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var("w")?)?;
    match p.opt_var("b") {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

pub fn layer_norm(g: &mut Graph, p: &Scope<'_>, x: Var) -> Result<Var> {
    g.layer_norm(x, p.var("gamma")?, p.var("beta")?, DEFAULT_LN_EPS)
}

/// Two-layer perceptron `fc2(act(fc1(x)))`.
pub fn mlp(g: &mut Graph, p: &Scope<'_>, x: Var, act: Activation) -> Result<Var> {
    let h = linear(g, &p.child("fc1"), x)?;
    let h = g.activation(h, act)?;
    linear(g, &p.child("fc2"), h)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn init_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    std: f64,
    rng: &mut R,
) {
    init_linear(store, &join(name, "fc1"), d_in, hidden, std, true, rng);
    init_linear(store, &join(name, "fc2"), hidden, d_out, std, true, rng);
}

pub(crate) fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    std: f64,
    rng: &mut R,
) {
    // Softmax is invariant to a key bias, so `k` has none.
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &join(name, proj), d, d, std, proj != "k", rng);
    }
}

/// Attention of `queries[N×d]` over `context[M×d]` with Q/K/V/output
/// projections under `p`.
pub fn attend(
    g: &mut Graph,
    p: &Scope<'_>,
    queries: Var,
    context: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, &p.child("q"), queries)?;
    let k = linear(g, &p.child("k"), context)?;
    let v = linear(g, &p.child("v"), context)?;
    let o = g.attention(q, k, v, heads)?;
    linear(g, &p.child("o"), o)
}

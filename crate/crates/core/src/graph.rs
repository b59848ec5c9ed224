//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only record of executed operations. Each op
//! stores its inputs and whatever it needs for the backward pass, so the
//! record is topologically ordered by construction and [`Graph::backward`]
//! visits every node once, in reverse. Gradients accumulate additively when a
//! value feeds several consumers.
//!
//! Every forward op checks its output and fails with
//! [`Error::NonFinite`] as soon as a NaN or infinity appears.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::scan::{self, ScanMode};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Deliberate backward-rule corruption, used as a negative control for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scale the left-operand gradient of every matmul by 1.5.
    MatMulLhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Act(Var, Activation),
    Exp(Var),
    Ln(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Diag(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Stack(Vec<Var>),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    ConvTranspose {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    Bilinear {
        x: Var,
        rows: Vec<(usize, usize, f64)>,
        cols: Vec<(usize, usize, f64)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Scan(Box<ScanSaved>),
}

#[derive(Debug)]
struct ScanSaved {
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    abar: Vec<f64>,
    h: Vec<f64>,
    mode: ScanMode,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | ScaleBy(a, b)
            | AddRow(a, b)
            | AddChannel(a, b) => vec![*a, *b],
            Transpose(a)
            | Reshape(a)
            | Scale(a, _)
            | AddScalar(a)
            | Act(a, _)
            | Exp(a)
            | Ln(a)
            | Sum(a)
            | Mean(a)
            | MeanRows(a)
            | Diag(a) => vec![*a],
            Softmax { x, .. }
            | LogSumExp { x, .. }
            | MaxRows { x, .. }
            | NormalizeRows { x, .. }
            | SliceCols { x, .. }
            | Bilinear { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Stack(vs) => vs.clone(),
            Conv1d { x, kernel, bias } => vec![*x, *kernel, *bias],
            ConvTranspose { x, kernel, .. } => vec![*x, *kernel],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Scan(s) => vec![s.x, s.delta, s.a, s.b, s.c, s.d],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::UnknownVar(v.index));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a leaf value; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a)?.shape(), self.val(b)?.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.val(a)?, self.val(b)?)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a)?.transpose2()?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a)?.clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "div", |x, y| x / y)?;
        self.push(out, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.val(a)?.map(|v| v * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// `a` times the value of the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.val(s)?.item()?;
        let out = self.val(a)?.map(|v| v * c);
        self.push(out, Op::ScaleBy(a, s), "scale_by")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.val(a)?.map(|v| v + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    /// Adds `row[n]` to every row of `a[..×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.val(a)?, self.val(row)?);
        let n = *ta.shape().last().unwrap_or(&1);
        if tr.shape() != [n] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", ta.shape(), tr.shape()),
            ));
        }
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    /// Adds `bias[C]` to every pixel of channel `c` in `x[C×H×W]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x)?, self.val(bias)?);
        let [c, h, w] = tx.shape()[..] else {
            return Err(Error::shape("add_channel", format!("{:?}", tx.shape())));
        };
        if tb.shape() != [c] {
            return Err(Error::shape(
                "add_channel",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let b = tb.data()[ch];
            plane.iter_mut().for_each(|v| *v += b);
        }
        self.push(out, Op::AddChannel(x, bias), "add_channel")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = ops::activation(self.val(x)?, kind)?;
        self.push(out, Op::Act(x, kind), "activation")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x)?.map(f64::exp);
        self.push(out, Op::Exp(x), "exp")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x)?.map(f64::ln);
        self.push(out, Op::Ln(x), "ln")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.val(x)?, axis)?;
        self.push(out, Op::Softmax { x, axis }, "softmax")
    }

    /// `log Σ exp` along `axis`, which is removed from the shape.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.val(x)?;
        if axis >= tx.rank() {
            return Err(Error::InvalidArgument(format!(
                "logsumexp axis {axis} for {:?}",
                tx.shape()
            )));
        }
        let data = ops::logsumexp_raw(tx.data(), tx.shape(), axis);
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        self.push(
            Tensor::from_parts(shape, data),
            Op::LogSumExp { x, axis },
            "logsumexp",
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) =
            ops::layer_norm_raw(self.val(x)?, self.val(gamma)?, self.val(beta)?, eps)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x)?.sum();
        self.push(Tensor::scalar_unchecked(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x)?;
        let s = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar_unchecked(s), Op::Mean(x), "mean")
    }

    /// Column means of `x[m×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.val(x)?.dims2()?;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(self.val(x)?.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        self.push(
            Tensor::from_parts(vec![n], out),
            Op::MeanRows(x),
            "mean_rows",
        )
    }

    /// Column maxima of `x[m×n]`; ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x)?;
        let (m, n) = tx.dims2()?;
        let mut out = tx.row(0).to_vec();
        let mut argmax = vec![0; n];
        for r in 1..m {
            for (j, &v) in tx.row(r).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = r;
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n], out),
            Op::MaxRows { x, argmax },
            "max_rows",
        )
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x)?;
        let (m, n) = tx.dims2()?;
        if m != n {
            return Err(Error::shape(
                "diag",
                format!("{:?} is not square", tx.shape()),
            ));
        }
        let out = (0..n).map(|i| tx.get2(i, i)).collect();
        self.push(Tensor::from_parts(vec![n], out), Op::Diag(x), "diag")
    }

    /// Scales every row (last axis) to unit L2 norm. A zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x)?;
        let n = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("normalize_rows", "scalar input"))?;
        let mut out = tx.clone();
        let mut norms = Vec::with_capacity(tx.numel() / n);
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > f64::MIN_POSITIVE) {
                return Err(Error::InvalidArgument(
                    "cannot normalize a zero vector".into(),
                ));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(out, Op::NormalizeRows { x, norms }, "normalize_rows")
    }

    /// Columns `start..end` of `x[m×n]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x)?;
        let (m, n) = tx.dims2()?;
        if start >= end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {n} columns"),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&tx.row(r)[start..end]);
        }
        self.push(
            Tensor::from_parts(vec![m, w], out),
            Op::SliceCols { x, start },
            "slice_cols",
        )
    }

    /// Stacks equally shaped vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of nothing".into()))?;
        let n = self.val(*first)?.numel();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let t = self.val(r)?;
            if t.rank() != 1 || t.numel() != n {
                return Err(Error::shape(
                    "stack",
                    format!("row {:?}, expected [{n}]", t.shape()),
                ));
            }
            out.extend_from_slice(t.data());
        }
        self.push(
            Tensor::from_parts(vec![rows.len(), n], out),
            Op::Stack(rows.to_vec()),
            "stack",
        )
    }

    pub fn conv1d_depthwise_causal(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = ops::conv1d_depthwise_causal(self.val(x)?, self.val(kernel)?, self.val(bias)?)?;
        self.push(
            out,
            Op::Conv1d { x, kernel, bias },
            "conv1d_depthwise_causal",
        )
    }

    pub fn conv2d_transpose(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let out = ops::conv2d_transpose(self.val(x)?, self.val(kernel)?, stride)?;
        self.push(
            out,
            Op::ConvTranspose { x, kernel, stride },
            "conv2d_transpose",
        )
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.val(x)?;
        let out = ops::bilinear_resize(tx, out_h, out_w)?;
        let r = tx.rank();
        let rows = ops::bilinear_taps(tx.shape()[r - 2], out_h);
        let cols = ops::bilinear_taps(tx.shape()[r - 1], out_w);
        self.push(out, Op::Bilinear { x, rows, cols }, "bilinear_resize")
    }

    /// Multi-head scaled dot-product attention over projected `q[N×d]`,
    /// `k[M×d]`, `v[M×d]`; heads split the width evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.val(q)?.dims2()?;
        let (m, dk) = self.val(k)?.dims2()?;
        let vshape = self.val(v)?.shape().to_vec();
        if dk != d || vshape != [m, d] {
            return Err(Error::shape(
                "attention",
                format!("q [{n}, {d}], k [{m}, {dk}], v {vshape:?}"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let (out, probs) = ops::attention_raw(
            self.val(q)?.data(),
            self.val(k)?.data(),
            self.val(v)?.data(),
            n,
            m,
            d,
            heads,
        );
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Selective scan over `x[T×D]` with step sizes `delta[T×D]`, continuous
    /// transition `a[D×S]`, per-step input/readout maps `b[T×S]`, `c[T×S]`
    /// and skip weights `d[D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let (t, di) = self.val(x)?.dims2()?;
        let (ad, s) = self.val(a)?.dims2()?;
        let ok = self.val(delta)?.shape() == [t, di]
            && ad == di
            && self.val(b)?.shape() == [t, s]
            && self.val(c)?.shape() == [t, s]
            && self.val(d)?.shape() == [di];
        if !ok {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                    self.val(x)?.shape(),
                    self.val(delta)?.shape(),
                    self.val(a)?.shape(),
                    self.val(b)?.shape(),
                    self.val(c)?.shape(),
                    self.val(d)?.shape()
                ),
            ));
        }
        let xd = self.val(x)?.data();
        let (abar, mut bx) = scan::discretize_raw(
            self.val(delta)?.data(),
            self.val(a)?.data(),
            self.val(b)?.data(),
            t,
            di,
            s,
        );
        for (idx, v) in bx.iter_mut().enumerate() {
            *v *= xd[idx / s];
        }
        let h = scan::linear_recurrence(&abar, &bx, t, di * s, mode);
        let y = scan::readout(&h, self.val(c)?.data(), self.val(d)?.data(), xd, t, di, s);
        let saved = ScanSaved {
            x,
            delta,
            a,
            b,
            c,
            d,
            abar,
            h,
            mode,
        };
        self.push(
            Tensor::from_parts(vec![t, di], y),
            Op::Scan(Box::new(saved)),
            "selective_scan",
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = &self.nodes[loss.index].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarSeed(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            out.push(match g {
                Some(g) if node.requires_grad => {
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                    t.ensure_finite("backward")?;
                    Some(t)
                }
                _ => None,
            });
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.index].value;
        // Runs `f` on the gradient buffer of `v` if `v` needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.index].requires_grad {
                let buf =
                    grads[v.index].get_or_insert_with(|| vec![0.0; nodes[v.index].value.numel()]);
                f(buf);
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).shape()[1];
                let lhs_scale = if self.fault == Some(BackwardFault::MatMulLhs) {
                    1.5
                } else {
                    1.0
                };
                acc(*a, &mut |ga| {
                    if lhs_scale == 1.0 {
                        ops::matmul_nt_into(g, val(*b).data(), ga, m, n, k);
                    } else {
                        let mut tmp = vec![0.0; m * k];
                        ops::matmul_nt_into(g, val(*b).data(), &mut tmp, m, n, k);
                        ga.iter_mut()
                            .zip(tmp)
                            .for_each(|(x, t)| *x += lhs_scale * t);
                    }
                });
                acc(*b, &mut |gb| {
                    ops::matmul_tn_into(val(*a).data(), g, gb, m, k, n)
                });
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2()?;
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) | Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::ScaleBy(a, s) => {
                let c = val(*s).data()[0];
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
                });
                let dot: f64 = val(*a).data().iter().zip(g).map(|(x, y)| x * y).sum();
                acc(*s, &mut |gs| gs[0] += dot);
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::AddChannel(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    let plane = g.len() / gb.len();
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        gb[ch] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Act(x, kind) => {
                let vx = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kind.derivative(vx[i]);
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * out.data()[i];
                }
            }),
            Op::Ln(x) => {
                let vx = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / vx[i];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = ops::axis_split(out.shape(), *axis);
                let y = out.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { x, axis } => {
                let tx = val(*x);
                let (outer, len, inner) = ops::axis_split(tx.shape(), *axis);
                let p = ops::softmax_raw(tx.data(), tx.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                let idx = (o * len + j) * inner + i;
                                gx[idx] += g[o * inner + i] * p[idx];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma).data();
                let n = gv.len();
                acc(*gamma, &mut |gg| {
                    for (r, chunk) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            gg[j] += chunk[j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, chunk) in g.chunks(n).enumerate() {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = chunk[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = chunk[j] * gv[j];
                            gx[r * n + j] += rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::MeanRows(x) => {
                let (m, n) = val(*x).dims2()?;
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        for j in 0..n {
                            gx[r * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::MaxRows { x, argmax } => {
                let n = argmax.len();
                acc(*x, &mut |gx| {
                    for (j, &r) in argmax.iter().enumerate() {
                        gx[r * n + j] += g[j];
                    }
                });
            }
            Op::Diag(x) => {
                let n = g.len();
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        gx[i * n + i] += g[i];
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = out.data();
                let n = y.len() / norms.len();
                acc(*x, &mut |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let range = r * n..(r + 1) * n;
                        let dot: f64 = y[range.clone()]
                            .iter()
                            .zip(&g[range.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for i in range {
                            gx[i] += (g[i] - y[i] * dot) / norm;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).dims2()?;
                let w = out.shape()[1];
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        add_into(
                            &mut gx[r * n + start..r * n + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::Stack(rows) => {
                let n = out.shape()[1];
                for (r, &v) in rows.iter().enumerate() {
                    acc(v, &mut |gv| add_into(gv, &g[r * n..(r + 1) * n]));
                }
            }
            Op::Conv1d { x, kernel, bias } => {
                let (t, c) = val(*x).dims2()?;
                let k = val(*kernel).shape()[0];
                let (xd, kd) = (val(*x).data(), val(*kernel).data());
                acc(*bias, &mut |gb| {
                    for chunk in g.chunks(c) {
                        add_into(gb, chunk);
                    }
                });
                acc(*kernel, &mut |gk| {
                    for step in 0..t {
                        for j in 0..k {
                            if step + j + 1 >= k {
                                let src = step + j + 1 - k;
                                for ch in 0..c {
                                    gk[j * c + ch] += g[step * c + ch] * xd[src * c + ch];
                                }
                            }
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for step in 0..t {
                        for j in 0..k {
                            if step + j + 1 >= k {
                                let src = step + j + 1 - k;
                                for ch in 0..c {
                                    gx[src * c + ch] += g[step * c + ch] * kd[j * c + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose { x, kernel, stride } => {
                let [c, h, w] = val(*x).shape()[..] else {
                    unreachable!()
                };
                let co = val(*kernel).shape()[1];
                let s = *stride;
                let (oh, ow) = (h * s, w * s);
                let (xd, kd) = (val(*x).data(), val(*kernel).data());
                acc(*x, &mut |gx| {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut total = 0.0;
                                for o in 0..co {
                                    let kbase = (ci * co + o) * s * s;
                                    for i in 0..s {
                                        let orow = (o * oh + y * s + i) * ow + xx * s;
                                        for j in 0..s {
                                            total += g[orow + j] * kd[kbase + i * s + j];
                                        }
                                    }
                                }
                                gx[(ci * h + y) * w + xx] += total;
                            }
                        }
                    }
                });
                acc(*kernel, &mut |gk| {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let v = xd[(ci * h + y) * w + xx];
                                for o in 0..co {
                                    let kbase = (ci * co + o) * s * s;
                                    for i in 0..s {
                                        let orow = (o * oh + y * s + i) * ow + xx * s;
                                        for j in 0..s {
                                            gk[kbase + i * s + j] += v * g[orow + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Bilinear { x, rows, cols } => {
                let tx = val(*x);
                let r = tx.rank();
                let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
                let (oh, ow) = (rows.len(), cols.len());
                let channels = tx.numel() / (h * w);
                acc(*x, &mut |gx| {
                    for ch in 0..channels {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                                plane[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = val(*q).dims2()?;
                let m = val(*k).shape()[0];
                let (gq, gk, gv) = attention_backward(
                    g,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    n,
                    m,
                    d,
                    *heads,
                );
                acc(*q, &mut |buf| add_into(buf, &gq));
                acc(*k, &mut |buf| add_into(buf, &gk));
                acc(*v, &mut |buf| add_into(buf, &gv));
            }
            Op::Scan(saved) => {
                let grads_in = scan_backward(
                    saved,
                    g,
                    &|v| val(v).data(),
                    val(saved.x).dims2()?,
                    val(saved.a).shape()[1],
                );
                let [gx, gdelta, ga, gb, gc, gd] = grads_in;
                acc(saved.x, &mut |buf| add_into(buf, &gx));
                acc(saved.delta, &mut |buf| add_into(buf, &gdelta));
                acc(saved.a, &mut |buf| add_into(buf, &ga));
                acc(saved.b, &mut |buf| add_into(buf, &gb));
                acc(saved.c, &mut |buf| add_into(buf, &gc));
                acc(saved.d, &mut |buf| add_into(buf, &gd));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; n * d];
    let mut gk = vec![0.0; m * d];
    let mut gv = vec![0.0; m * d];
    let mut dp = vec![0.0; m];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * n * m..(h + 1) * n * m];
        for i in 0..n {
            let gi = &g[i * d + off..i * d + off + dh];
            let prow = &p[i * m..(i + 1) * m];
            for j in 0..m {
                let vj = &v[j * d + off..j * d + off + dh];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                for (o, gg) in gv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                    *o += prow[j] * gg;
                }
            }
            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..m {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    gq[i * d + off + t] += ds * k[j * d + off + t];
                    gk[j * d + off + t] += ds * q[i * d + off + t];
                }
            }
        }
    }
    (gq, gk, gv)
}

fn scan_backward<'a>(
    s: &ScanSaved,
    gy: &[f64],
    val: &dyn Fn(Var) -> &'a [f64],
    (t, d): (usize, usize),
    st: usize,
) -> [Vec<f64>; 6] {
    let (x, delta, a, b, c, dskip) = (
        val(s.x),
        val(s.delta),
        val(s.a),
        val(s.b),
        val(s.c),
        val(s.d),
    );
    let w = d * st;
    let mut gx = vec![0.0; t * d];
    let mut gdelta = vec![0.0; t * d];
    let mut ga = vec![0.0; d * st];
    let mut gb = vec![0.0; t * st];
    let mut gc = vec![0.0; t * st];
    let mut gd = vec![0.0; d];

    // Readout: y = C·h + D⊙x
    let mut gh_rev = vec![0.0; t * w];
    for step in 0..t {
        let rev = t - 1 - step;
        for i in 0..d {
            let gyi = gy[step * d + i];
            gd[i] += gyi * x[step * d + i];
            gx[step * d + i] += gyi * dskip[i];
            let base = (step * d + i) * st;
            for k in 0..st {
                gc[step * st + k] += gyi * s.h[base + k];
                gh_rev[rev * w + i * st + k] = gyi * c[step * st + k];
            }
        }
    }
    // Adjoint recurrence runs backwards in time: G_t = gh_t + Ā_{t+1} ⊙ G_{t+1}.
    let mut a_rev = vec![0.0; t * w];
    for rev in 1..t {
        let step = t - rev;
        a_rev[rev * w..(rev + 1) * w].copy_from_slice(&s.abar[step * w..(step + 1) * w]);
    }
    let g_rev = scan::linear_recurrence(&a_rev, &gh_rev, t, w, s.mode);

    for step in 0..t {
        let rev = t - 1 - step;
        for i in 0..d {
            let dt = delta[step * d + i];
            let xi = x[step * d + i];
            let mut gdt = 0.0;
            let mut gxi = 0.0;
            for k in 0..st {
                let idx = (step * d + i) * st + k;
                let gstate = g_rev[rev * w + i * st + k];
                // Ā path
                if step > 0 {
                    let gabar = gstate * s.h[idx - w];
                    let ab = s.abar[idx] * gabar;
                    gdt += ab * a[i * st + k];
                    ga[i * st + k] += ab * dt;
                }
                // B̄x path
                let bk = b[step * st + k];
                gdt += gstate * bk * xi;
                gb[step * st + k] += gstate * dt * xi;
                gxi += gstate * dt * bk;
            }
            gdelta[step * d + i] += gdt;
            gx[step * d + i] += gxi;
        }
    }
    [gx, gdelta, ga, gb, gc, gd]
}

impl Tensor {
    pub(crate) fn scalar_unchecked(v: f64) -> Tensor {
        Tensor::from_parts(Vec::new(), vec![v])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap(), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarSeed(_))));
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.leaf(Tensor::zeros(&[2]), true);
        g2.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g2.sum(x), Err(Error::UnknownVar(_))));
    }

    #[test]
    fn nan_fails_fast() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0]).unwrap(), true);
        assert!(matches!(g.ln(x), Err(Error::NonFinite { op: "ln" })));
        let big = g.leaf(Tensor::vector(vec![1000.0]).unwrap(), true);
        assert!(matches!(g.exp(big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![2.0]).unwrap(), true);
        let c = g.constant(Tensor::vector(vec![5.0]).unwrap());
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }
}

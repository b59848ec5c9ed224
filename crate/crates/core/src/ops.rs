//! Eager tensor kernels. The tape in [`crate::graph`] wraps these and adds the
//! matching backward rules.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a[k×m]`, `b[k×n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a[m×k]`, `b[n×k]`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    let out = Tensor::from_parts(vec![m, n], out);
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_raw(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| x[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

/// Softmax along `axis`, computed after subtracting each slice's maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    x.ensure_finite("softmax")?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        softmax_raw(x.data(), x.shape(), axis),
    ))
}

pub(crate) fn logsumexp_raw(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| x[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|j| (x[idx(j)] - max).exp()).sum();
            out[o * inner + i] = max + total.ln();
        }
    }
    out
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (y, _, _) = layer_norm_raw(x, gamma, beta, eps)?;
    Ok(y)
}

/// Returns `(output, normalized input, 1/std per row)`.
pub(crate) fn layer_norm_raw(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm", "scalar input has no axis to normalize"))?;
    if gamma.shape() != [width] || beta.shape() != [width] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} vs last axis {width}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps {eps}")));
    }
    let rows = x.numel() / width;
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = &x.data()[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + eps).sqrt();
        if !inv.is_finite() {
            return Err(Error::NonFinite { op: "layer_norm" });
        }
        rstd[r] = inv;
        for j in 0..width {
            let h = (row[j] - mean) * inv;
            xhat[r * width + j] = h;
            out[r * width + j] = h * g[j] + b[j];
        }
    }
    let out = Tensor::from_parts(x.shape().to_vec(), out);
    out.ensure_finite("layer_norm")?;
    Ok((out, xhat, rstd))
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    /// Tanh approximation of GELU.
    Gelu,
    Sigmoid,
    Relu,
    Softplus,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Self::Silu),
            "gelu" => Ok(Self::Gelu),
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            "softplus" => Ok(Self::Softplus),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Silu => "silu",
            Self::Gelu => "gelu",
            Self::Sigmoid => "sigmoid",
            Self::Relu => "relu",
            Self::Softplus => "softplus",
        };
        f.write_str(name)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Silu => x * sigmoid(x),
            Self::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Self::Sigmoid => sigmoid(x),
            Self::Relu => x.max(0.0),
            Self::Softplus => softplus(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Self::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Self::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Softplus => sigmoid(x),
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    let out = x.map(|v| kind.apply(v));
    out.ensure_finite("activation")?;
    Ok(out)
}

pub(crate) fn conv1d_check(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize)> {
    let (t, c) = x.dims2()?;
    let (k, kc) = kernel.dims2()?;
    if kc != c || bias.shape() != [c] {
        return Err(Error::shape(
            "conv1d_depthwise_causal",
            format!(
                "x {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                kernel.shape(),
                bias.shape()
            ),
        ));
    }
    Ok((t, c, k))
}

/// Depthwise causal convolution over time: `y[t,c] = bias[c] + Σ_j kernel[j,c]·x[t-(K-1)+j, c]`,
/// with implicit zeros before the first step. Kernel row `K-1` weights the current step.
pub fn conv1d_depthwise_causal(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (t, c, k) = conv1d_check(x, kernel, bias)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; t * c];
    for step in 0..t {
        for ch in 0..c {
            let mut acc = bias.data()[ch];
            for j in 0..k {
                let src = step + j;
                if src + 1 >= k {
                    acc += kd[j * c + ch] * xd[(src + 1 - k) * c + ch];
                }
            }
            out[step * c + ch] = acc;
        }
    }
    let out = Tensor::from_parts(vec![t, c], out);
    out.ensure_finite("conv1d_depthwise_causal")?;
    Ok(out)
}

pub(crate) fn conv_t_check(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<[usize; 5]> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input {:?} is not C×H×W", x.shape()),
        ));
    };
    let [kc, co, kh, kw] = kernel.shape()[..] else {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("kernel {:?} is not C×C'×K×K", kernel.shape()),
        ));
    };
    if kh != kw || kh != stride {
        return Err(Error::InvalidArgument(format!(
            "conv2d_transpose needs a square kernel equal to the stride, got {kh}×{kw} with stride {stride}"
        )));
    }
    if kc != c {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input has {c} channels, kernel expects {kc}"),
        ));
    }
    Ok([c, h, w, co, stride])
}

/// Non-overlapping transposed convolution (kernel size equals stride).
pub fn conv2d_transpose(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let [c, h, w, co, s] = conv_t_check(x, kernel, stride)?;
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; co * oh * ow];
    let (xd, kd) = (x.data(), kernel.data());
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = xd[(ci * h + y) * w + xx];
                for o in 0..co {
                    let kbase = (ci * co + o) * s * s;
                    for i in 0..s {
                        let orow = (o * oh + y * s + i) * ow + xx * s;
                        for j in 0..s {
                            out[orow + j] += v * kd[kbase + i * s + j];
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_parts(vec![co, oh, ow], out);
    out.ensure_finite("conv2d_transpose")?;
    Ok(out)
}

/// Source taps for half-pixel bilinear resampling along one axis:
/// `(lower index, upper index, weight of upper)` per output position.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` (or `H×W`) map using half-pixel centers and edge clamping.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match x.shape()[..] {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("bilinear_resize", format!("{:?}", x.shape()))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "bilinear_resize to an empty grid".into(),
        ));
    }
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let xd = x.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Ok(Tensor::from_parts(shape, out))
}

/// Multi-head scaled dot-product attention on already projected inputs.
/// Returns the concatenated head outputs `[N×d]` and the attention
/// probabilities `[heads×N×M]`.
pub(crate) fn attention_raw(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * n * m];
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut p[i * m..(i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*r);
            }
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r /= total;
            }
            let oi = &mut out[i * d + off..i * d + off + dh];
            for (j, &pij) in row.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, vv) in oi.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
    }
    (out, probs)
}

//! Selective state-space recurrence: zero-order-hold discretization and two
//! evaluation strategies for `h_t = Ā_t ⊙ h_{t-1} + B̄x_t`.
//!
//! The parallel strategy treats each step as the affine map `h ↦ a·h + b` and
//! runs a work-efficient (Blelloch) up-sweep/down-sweep over the composition
//!
//! ```text
//! (a₁, b₁) then (a₂, b₂)  =  (a₂·a₁, a₂·b₁ + b₂)
//! ```
//!
//! Every time step carries a whole row of independent channels, so one tree
//! node combines `width` pairs at once. Within a tree level the nodes touch
//! disjoint memory and may run on several threads; the combine order per node
//! is fixed, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strategy for evaluating the linear recurrence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    #[default]
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            other => Err(Error::InvalidArgument(format!(
                "unknown scan mode `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sequential => "sequential",
            Self::Parallel => "parallel",
        })
    }
}

/// Discretized inputs of one selective scan.
///
/// Shapes: `abar`, `bx` are `T×D×S`; `c` is `T×S`; `d` is `D`; `x` is `T×D`.
/// For a stable block `0 < abar < 1`, but the scan itself accepts any finite
/// transition (degenerate values are useful in tests).
#[derive(Clone, Debug)]
pub struct ScanInputs {
    pub abar: Tensor,
    pub bx: Tensor,
    pub c: Tensor,
    pub d: Tensor,
    pub x: Tensor,
}

impl ScanInputs {
    pub fn new(abar: Tensor, bx: Tensor, c: Tensor, d: Tensor, x: Tensor) -> Result<Self> {
        let s = Self { abar, bx, c, d, x };
        s.dims()?;
        Ok(s)
    }

    /// `(T, D, S)`
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let [t, d, s] = self.abar.shape()[..] else {
            return Err(Error::shape(
                "scan",
                format!("abar {:?} is not T×D×S", self.abar.shape()),
            ));
        };
        let ok = self.bx.shape() == [t, d, s]
            && self.c.shape() == [t, s]
            && self.d.shape() == [d]
            && self.x.shape() == [t, d];
        if !ok {
            return Err(Error::shape(
                "scan",
                format!(
                    "abar {:?}, bx {:?}, c {:?}, d {:?}, x {:?}",
                    self.abar.shape(),
                    self.bx.shape(),
                    self.c.shape(),
                    self.d.shape(),
                    self.x.shape()
                ),
            ));
        }
        Ok((t, d, s))
    }
}

/// Zero-order hold for the transition and Euler form for the input matrix:
/// `Ā[t,i,s] = exp(Δ[t,i]·A[i,s])`, `B̄[t,i,s] = Δ[t,i]·B[t,s]`.
pub fn discretize_zoh(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (t, d) = delta.dims2()?;
    let (ad, s) = a.dims2()?;
    let (bt, bs) = b.dims2()?;
    if ad != d || bt != t || bs != s {
        return Err(Error::shape(
            "discretize_zoh",
            format!(
                "delta {:?}, A {:?}, B {:?}",
                delta.shape(),
                a.shape(),
                b.shape()
            ),
        ));
    }
    if delta.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument(
            "discretize_zoh needs delta > 0".into(),
        ));
    }
    if a.data().iter().any(|&v| v >= 0.0) {
        return Err(Error::InvalidArgument("discretize_zoh needs A < 0".into()));
    }
    let (abar, bbar) = discretize_raw(delta.data(), a.data(), b.data(), t, d, s);
    Ok((
        Tensor::from_parts(vec![t, d, s], abar),
        Tensor::from_parts(vec![t, d, s], bbar),
    ))
}

pub(crate) fn discretize_raw(
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    t: usize,
    d: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut abar = vec![0.0; t * d * s];
    let mut bbar = vec![0.0; t * d * s];
    for step in 0..t {
        for i in 0..d {
            let dt = delta[step * d + i];
            let base = (step * d + i) * s;
            for k in 0..s {
                abar[base + k] = (dt * a[i * s + k]).exp();
                bbar[base + k] = dt * b[step * s + k];
            }
        }
    }
    (abar, bbar)
}

/// Hidden states of `h_t = a_t ⊙ h_{t-1} + b_t`, `h_{-1} = 0`, for `steps`
/// rows of `width` channels each (`a`, `b`, result all `steps×width`).
pub(crate) fn linear_recurrence(
    a: &[f64],
    b: &[f64],
    steps: usize,
    width: usize,
    mode: ScanMode,
) -> Vec<f64> {
    match mode {
        ScanMode::Sequential => recurrence_sequential(a, b, steps, width),
        ScanMode::Parallel => recurrence_blelloch(a, b, steps, width),
    }
}

fn recurrence_sequential(a: &[f64], b: &[f64], steps: usize, width: usize) -> Vec<f64> {
    let mut h = vec![0.0; steps * width];
    h[..width].copy_from_slice(&b[..width]);
    for t in 1..steps {
        let (prev, cur) = h.split_at_mut(t * width);
        let prev = &prev[(t - 1) * width..];
        let row = t * width;
        for w in 0..width {
            cur[w] = a[row + w] * prev[w] + b[row + w];
        }
    }
    h
}

/// Work below this many pair-combines per level stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// `dst = src then dst` for whole rows of pairs.
#[inline]
fn combine_rows(src_a: &[f64], src_b: &[f64], dst_a: &mut [f64], dst_b: &mut [f64]) {
    for w in 0..dst_a.len() {
        let a2 = dst_a[w];
        dst_b[w] += a2 * src_b[w];
        dst_a[w] = a2 * src_a[w];
    }
}

fn for_each_node(
    sa: &mut [f64],
    sb: &mut [f64],
    stride: usize,
    width: usize,
    node: impl Fn(&mut [f64], &mut [f64]) + Sync,
) {
    let chunk = 2 * stride * width;
    if sa.len() / 2 >= PAR_THRESHOLD {
        sa.par_chunks_mut(chunk)
            .zip(sb.par_chunks_mut(chunk))
            .for_each(|(ca, cb)| node(ca, cb));
    } else {
        sa.chunks_mut(chunk)
            .zip(sb.chunks_mut(chunk))
            .for_each(|(ca, cb)| node(ca, cb));
    }
}

fn recurrence_blelloch(a: &[f64], b: &[f64], steps: usize, width: usize) -> Vec<f64> {
    let n = steps.next_power_of_two();
    // Identity element (1, 0) pads the tree to a power of two.
    let mut sa = vec![1.0; n * width];
    let mut sb = vec![0.0; n * width];
    sa[..steps * width].copy_from_slice(&a[..steps * width]);
    sb[..steps * width].copy_from_slice(&b[..steps * width]);

    // Up-sweep: node (2s-1) of every 2s-block absorbs node (s-1) on its left.
    let mut stride = 1;
    while stride < n {
        for_each_node(&mut sa, &mut sb, stride, width, |ca, cb| {
            let (la, ra) = ca.split_at_mut((2 * stride - 1) * width);
            let (lb, rb) = cb.split_at_mut((2 * stride - 1) * width);
            let l = (stride - 1) * width..stride * width;
            combine_rows(&la[l.clone()], &lb[l], &mut ra[..width], &mut rb[..width]);
        });
        stride *= 2;
    }

    // Down-sweep to an exclusive scan.
    sa[(n - 1) * width..].fill(1.0);
    sb[(n - 1) * width..].fill(0.0);
    stride = n / 2;
    while stride >= 1 {
        for_each_node(&mut sa, &mut sb, stride, width, |ca, cb| {
            let (la, ra) = ca.split_at_mut((2 * stride - 1) * width);
            let (lb, rb) = cb.split_at_mut((2 * stride - 1) * width);
            let l = (stride - 1) * width..stride * width;
            let left_a = la[l.clone()].to_vec();
            let left_b = lb[l.clone()].to_vec();
            // left <- prefix arriving from the parent; right <- parent prefix then left subtree.
            la[l.clone()].copy_from_slice(&ra[..width]);
            lb[l].copy_from_slice(&rb[..width]);
            let (pa, pb) = (&mut ra[..width], &mut rb[..width]);
            for w in 0..width {
                let pa0 = pa[w];
                pb[w] = left_a[w] * pb[w] + left_b[w];
                pa[w] = left_a[w] * pa0;
            }
        });
        stride /= 2;
    }

    // Inclusive state: apply step t to the exclusive prefix evaluated at h = 0.
    let mut h = vec![0.0; steps * width];
    for i in 0..steps * width {
        h[i] = a[i] * sb[i] + b[i];
    }
    h
}

/// `y[t,i] = Σ_s C[t,s]·h[t,i,s] + D[i]·x[t,i]`
pub(crate) fn readout(
    h: &[f64],
    c: &[f64],
    dskip: &[f64],
    x: &[f64],
    t: usize,
    d: usize,
    s: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; t * d];
    for step in 0..t {
        let crow = &c[step * s..(step + 1) * s];
        for i in 0..d {
            let hrow = &h[(step * d + i) * s..(step * d + i + 1) * s];
            let acc: f64 = crow.iter().zip(hrow).map(|(a, b)| a * b).sum();
            y[step * d + i] = acc + dskip[i] * x[step * d + i];
        }
    }
    y
}

fn run(s: &ScanInputs, mode: ScanMode) -> Result<Tensor> {
    let (t, d, st) = s.dims()?;
    let h = linear_recurrence(s.abar.data(), s.bx.data(), t, d * st, mode);
    let y = readout(&h, s.c.data(), s.d.data(), s.x.data(), t, d, st);
    let y = Tensor::from_parts(vec![t, d], y);
    y.ensure_finite("selective_scan")?;
    Ok(y)
}

/// Step-by-step evaluation of the recurrence and readout.
pub fn selective_scan_sequential(s: &ScanInputs) -> Result<Tensor> {
    run(s, ScanMode::Sequential)
}

/// Same result as [`selective_scan_sequential`] computed by an associative
/// up/down-sweep over the time axis.
pub fn selective_scan_parallel(s: &ScanInputs) -> Result<Tensor> {
    run(s, ScanMode::Parallel)
}

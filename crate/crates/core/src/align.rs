//! Pooling, projection heads and the image–gene contrastive losses.
//!
//! Both heads map a pooled `d_model` vector to a unit-norm `d_feat` feature
//! through a bias-free linear map (`align.image_proj`, `align.gene_proj`).
//! With `learn_tau` the temperature is the parameter `align.log_tau`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::{join, ParamStore, Scope};
use crate::tensor::Tensor;

pub const PREFIX: &str = "align";
pub const LOG_TAU_MIN: f64 = -4.605_170_185_988_091; // ln 0.01
pub const LOG_TAU_MAX: f64 = 4.605_170_185_988_092; // ln 100

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossVariant {
    /// Negated log-likelihood of the diagonal against one softmax over all
    /// `B²` pairs.
    #[default]
    Paper,
    /// Row- and column-wise cross-entropy with diagonal targets, averaged.
    Symmetric,
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "symmetric" => Ok(Self::Symmetric),
            _ => Err(Error::InvalidArgument(format!(
                "unknown loss variant {s:?} (expected paper or symmetric)"
            ))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Symmetric => "symmetric",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub d_feat: usize,
    pub tau: f64,
    pub learn_tau: bool,
    pub variant: LossVariant,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            d_feat: 32,
            tau: 0.07,
            learn_tau: false,
            variant: LossVariant::Paper,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.d_feat == 0 {
            return Err(Error::InvalidArgument("d_feat must be positive".into()));
        }
        Ok(())
    }
}

/// Projection heads, plus `log_tau` when the temperature is learned.
pub fn init<R: Rng + ?Sized>(cfg: &AlignConfig, d_model: usize, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let std = 1.0 / (d_model as f64).sqrt();
    for head in ["image_proj", "gene_proj"] {
        s.insert(
            join(PREFIX, &join(head, "w")),
            Tensor::randn(&[d_model, cfg.d_feat], std, rng),
        );
    }
    if cfg.learn_tau {
        s.insert(join(PREFIX, "log_tau"), Tensor::vector(vec![cfg.tau.ln()])?);
    }
    Ok(s)
}

/// Clamps a learned `log_tau` back into `[ln 0.01, ln 100]`.
pub fn clamp_log_tau(params: &mut ParamStore) {
    if let Some(t) = params.get_mut(&join(PREFIX, "log_tau")) {
        for v in t.data_mut() {
            *v = v.clamp(LOG_TAU_MIN, LOG_TAU_MAX);
        }
    }
}

/// `0.5·mean + 0.5·max` over the tokens (rows) of `tokens[T×d]`.
pub fn mixed_pool(g: &mut Graph, tokens: Var) -> Result<Var> {
    let mean = g.mean_rows(tokens)?;
    let max = g.max_rows(tokens)?;
    let s = g.add(mean, max)?;
    g.scale(s, 0.5)
}

pub fn mixed_pool_eager(tokens: &Tensor) -> Result<Tensor> {
    let (t, d) = tokens.dims2()?;
    let mut out = vec![0.0; d];
    for (j, o) in out.iter_mut().enumerate() {
        let col = (0..t).map(|r| tokens.get2(r, j));
        let (sum, max) = col.fold((0.0, f64::NEG_INFINITY), |(s, m), v| (s + v, m.max(v)));
        *o = 0.5 * (sum / t as f64) + 0.5 * max;
    }
    Tensor::vector(out)
}

/// Bias-free projection of pooled rows `[B×d_model]` followed by per-row L2
/// normalization; `p` is a head scope (`align.image_proj`).
pub fn project_features(g: &mut Graph, p: &Scope<'_>, pooled: Var) -> Result<Var> {
    let z = g.matmul(pooled, p.var("w")?)?;
    g.normalize_rows(z)
}

pub fn project_features_eager(pooled: &Tensor, w: &Tensor) -> Result<Tensor> {
    let row = pooled.clone().reshape(&[1, pooled.numel()])?;
    let z = ops::matmul(&row, w)?;
    let norm = z.l2_norm();
    if !(norm > f64::MIN_POSITIVE) {
        return Err(Error::InvalidArgument(
            "projected feature is the zero vector".into(),
        ));
    }
    z.map(|v| v / norm).reshape(&[w.shape()[1]])
}

/// `S = I·Gᵀ / τ` for unit feature rows `I[B×f]`, `G[B×f]`.
pub fn similarity_matrix(g: &mut Graph, image: Var, genes: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let gt = g.transpose(genes)?;
    let s = g.matmul(image, gt)?;
    g.scale(s, 1.0 / tau)
}

/// As [`similarity_matrix`] with a learned temperature `τ = exp(log_tau)`.
pub fn similarity_matrix_learned(
    g: &mut Graph,
    image: Var,
    genes: Var,
    log_tau: Var,
) -> Result<Var> {
    let gt = g.transpose(genes)?;
    let s = g.matmul(image, gt)?;
    let neg = g.scale(log_tau, -1.0)?;
    let inv_tau = g.exp(neg)?;
    g.scale_by(s, inv_tau)
}

pub fn similarity_eager(image: &Tensor, genes: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(ops::matmul(image, &genes.transpose2()?)?.map(|v| v / tau))
}

/// Contrastive loss of a square similarity matrix.
pub fn contrastive_loss(g: &mut Graph, s: Var, variant: LossVariant) -> Result<Var> {
    let (b, c) = g.value(s).dims2()?;
    if b != c {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{b}×{c} similarity matrix"),
        ));
    }
    let diag = g.diag(s)?;
    let diag_mean = g.mean(diag)?;
    match variant {
        LossVariant::Paper => {
            let flat = g.reshape(s, &[b * b])?;
            let lse = g.logsumexp(flat, 0)?;
            g.sub(lse, diag_mean)
        }
        LossVariant::Symmetric => {
            let rows = g.logsumexp(s, 1)?;
            let cols = g.logsumexp(s, 0)?;
            let rows = g.mean(rows)?;
            let cols = g.mean(cols)?;
            let both = g.add(rows, cols)?;
            let both = g.scale(both, 0.5)?;
            g.sub(both, diag_mean)
        }
    }
}

pub fn contrastive_loss_eager(s: &Tensor, variant: LossVariant) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let l = contrastive_loss(&mut g, v, variant)?;
    g.value(l).item()
}

//! Gene encoder: a standardized expression vector is cut into contiguous
//! chunks, each chunk is linearly embedded as one token, and the token
//! sequence runs through a stack of selective state-space blocks.
//!
//! Parameter layout (prefix `gene`):
//!
//! | name                         | shape            |
//! |------------------------------|------------------|
//! | `tokenizer`                  | `c × d_model`    |
//! | `block{i}.norm.{gamma,beta}` | `d_model`        |
//! | `block{i}.in_proj`           | `d_model × 2·d_inner` |
//! | `block{i}.conv.{kernel,bias}`| `K × d_inner`, `d_inner` |
//! | `block{i}.dt.{w,b}`          | `d_inner × d_inner`, `d_inner` |
//! | `block{i}.b_proj`, `c_proj`  | `d_inner × d_state` |
//! | `block{i}.a_log`             | `d_inner × d_state` (stores `log(−A)`) |
//! | `block{i}.d_skip`            | `d_inner`        |
//! | `block{i}.out_proj`          | `d_inner × d_model` |
//! | `final_norm.{gamma,beta}`    | `d_model`        |

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::ops::{self, Activation};
use crate::params::{join, ParamStore, Scope};
use crate::scan::ScanMode;
use crate::tensor::Tensor;

pub const PREFIX: &str = "gene";

#[derive(Clone, Debug, PartialEq)]
pub struct GeneConfig {
    pub n_genes: usize,
    /// Genes per token.
    pub chunk_size: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub depth: usize,
    pub scan: ScanMode,
}

impl Default for GeneConfig {
    fn default() -> Self {
        Self {
            n_genes: 1024,
            chunk_size: 16,
            d_model: 32,
            d_inner: 64,
            d_state: 8,
            conv_kernel: 4,
            depth: 2,
            scan: ScanMode::Parallel,
        }
    }
}

impl GeneConfig {
    /// `ceil(n_genes / chunk_size)`
    pub fn token_count(&self) -> usize {
        self.n_genes.div_ceil(self.chunk_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_genes == 0 {
            return Err(Error::InvalidArgument("n_genes must be positive".into()));
        }
        if self.chunk_size == 0
            || self.d_model == 0
            || self.d_inner == 0
            || self.d_state == 0
            || self.conv_kernel == 0
        {
            return Err(Error::InvalidArgument(format!(
                "degenerate gene encoder config {self:?}"
            )));
        }
        if self.token_count() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{} genes in chunks of {} give fewer than two tokens",
                self.n_genes, self.chunk_size
            )));
        }
        Ok(())
    }
}

/// Inverse of softplus, `log(eˣ − 1)`.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Fresh gene-encoder parameters.
pub fn init<R: Rng + ?Sized>(cfg: &GeneConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let (dm, di, ds) = (cfg.d_model, cfg.d_inner, cfg.d_state);
    let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    s.insert(
        join(PREFIX, "tokenizer"),
        Tensor::randn(&[cfg.chunk_size, dm], std(cfg.chunk_size), rng),
    );
    for i in 0..cfg.depth {
        let b = format!("{PREFIX}.block{i}");
        nn::init_norm(&mut s, &join(&b, "norm"), dm);
        s.insert(
            join(&b, "in_proj"),
            Tensor::randn(&[dm, 2 * di], std(dm), rng),
        );
        s.insert(
            join(&b, "conv.kernel"),
            Tensor::randn(&[cfg.conv_kernel, di], std(cfg.conv_kernel), rng),
        );
        s.insert(join(&b, "conv.bias"), Tensor::zeros(&[di]));
        s.insert(
            join(&b, "dt.w"),
            Tensor::randn(&[di, di], 0.1 * std(di), rng),
        );
        // Step sizes start log-uniform in [0.01, 0.1].
        let dt_bias = (0..di)
            .map(|_| softplus_inv(rng.random_range(0.01f64.ln()..0.1f64.ln()).exp()))
            .collect();
        s.insert(join(&b, "dt.b"), Tensor::vector(dt_bias)?);
        s.insert(join(&b, "b_proj"), Tensor::randn(&[di, ds], std(di), rng));
        s.insert(join(&b, "c_proj"), Tensor::randn(&[di, ds], std(di), rng));
        // −A = 1, 2, …, d_state along the state axis.
        let a_log = (0..di * ds).map(|k| ((k % ds) as f64 + 1.0).ln()).collect();
        s.insert(join(&b, "a_log"), Tensor::matrix(di, ds, a_log)?);
        s.insert(join(&b, "d_skip"), Tensor::ones(&[di]));
        s.insert(join(&b, "out_proj"), Tensor::randn(&[di, dm], std(di), rng));
    }
    nn::init_norm(&mut s, &join(PREFIX, "final_norm"), dm);
    Ok(s)
}

/// Reshapes an expression vector into a `T×c` chunk matrix, zero-padding
/// the last chunk.
pub fn chunk_matrix(expr: &[f64], cfg: &GeneConfig) -> Result<Tensor> {
    if expr.is_empty() {
        return Err(Error::InvalidArgument("empty expression vector".into()));
    }
    if expr.len() != cfg.n_genes {
        return Err(Error::shape(
            "tokenize_genes",
            format!(
                "{} expression values, config expects {}",
                expr.len(),
                cfg.n_genes
            ),
        ));
    }
    let t = cfg.token_count();
    let mut data = vec![0.0; t * cfg.chunk_size];
    data[..expr.len()].copy_from_slice(expr);
    Tensor::matrix(t, cfg.chunk_size, data)
}

/// Eager tokenization: `chunks[T×c] · proj[c×d_model]`.
pub fn tokenize_genes(expr: &[f64], cfg: &GeneConfig, proj: &Tensor) -> Result<Tensor> {
    ops::matmul(&chunk_matrix(expr, cfg)?, proj)
}

pub fn tokenize(g: &mut Graph, p: &Scope<'_>, expr: &[f64], cfg: &GeneConfig) -> Result<Var> {
    let chunks = g.constant(chunk_matrix(expr, cfg)?);
    g.matmul(chunks, p.var("tokenizer")?)
}

/// One selective state-space block with a residual connection; `p` is the
/// block scope (`gene.block{i}`).
pub fn mamba_block(g: &mut Graph, p: &Scope<'_>, tokens: Var, cfg: &GeneConfig) -> Result<Var> {
    let di = cfg.d_inner;
    let h = nn::layer_norm(g, &p.child("norm"), tokens)?;
    let xz = g.matmul(h, p.var("in_proj")?)?;
    let x = g.slice_cols(xz, 0, di)?;
    let z = g.slice_cols(xz, di, 2 * di)?;
    let x = g.conv1d_depthwise_causal(x, p.var("conv.kernel")?, p.var("conv.bias")?)?;
    let x = g.silu(x)?;
    let dt = nn::linear(g, &p.child("dt"), x)?;
    let delta = g.activation(dt, Activation::Softplus)?;
    let b = g.matmul(x, p.var("b_proj")?)?;
    let c = g.matmul(x, p.var("c_proj")?)?;
    let a = g.exp(p.var("a_log")?)?;
    let a = g.scale(a, -1.0)?;
    let y = g.selective_scan(x, delta, a, b, c, p.var("d_skip")?, cfg.scan)?;
    let gate = g.silu(z)?;
    let y = g.mul(y, gate)?;
    let out = g.matmul(y, p.var("out_proj")?)?;
    g.add(tokens, out)
}

/// Tokens through the block stack and the final norm. `p` is the `gene` scope.
pub fn encode_tokens(g: &mut Graph, p: &Scope<'_>, tokens: Var, cfg: &GeneConfig) -> Result<Var> {
    let mut x = tokens;
    for i in 0..cfg.depth {
        x = mamba_block(g, &p.child(&format!("block{i}")), x, cfg)?;
    }
    nn::layer_norm(g, &p.child("final_norm"), x)
}

/// Standardized expression vector to `T×d_model` tokens.
pub fn encode_genes(g: &mut Graph, p: &Scope<'_>, expr: &[f64], cfg: &GeneConfig) -> Result<Var> {
    let tokens = tokenize(g, p, expr, cfg)?;
    encode_tokens(g, p, tokens, cfg)
}

/// Per-gene standardization statistics, estimated on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GeneStats {
    /// Population mean and standard deviation per gene. Genes with
    /// (near-)zero spread keep unit scale.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for s in samples {
            if sum.is_empty() {
                sum = vec![0.0; s.len()];
                sq = vec![0.0; s.len()];
            } else if s.len() != sum.len() {
                return Err(Error::shape(
                    "gene stats",
                    format!("{} vs {} genes", s.len(), sum.len()),
                ));
            }
            for (j, &v) in s.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidArgument(
                "no samples to fit gene statistics".into(),
            ));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn apply(&self, expr: &[f64]) -> Vec<f64> {
        expr.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

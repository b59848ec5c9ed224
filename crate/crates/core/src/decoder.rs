//! Two-way attention fusion decoder and the Dice objective.
//!
//! Each interaction block updates gene tokens with self-attention, then with
//! cross-attention over the image tokens, then with an MLP, and finally
//! updates the image tokens with cross-attention over the genes. All four
//! steps are pre-norm and residual, single-head. The mask output module
//! upsamples the image grid 4× with two stride-2 transposed convolutions,
//! reduces the gene tokens to one query vector, and reads logits off the
//! per-pixel dot product before a bilinear resize to full resolution.
//!
//! Parameter layout (prefix `decoder`):
//!
//! | name                                   | shape                   |
//! |----------------------------------------|-------------------------|
//! | `block{i}.norm{1..4}.{gamma,beta}`     | `d`                     |
//! | `block{i}.{self_attn,g2i,i2g}.{q,k,v,o}.{w,b}` | `d×d`, `d` (no `k.b`) |
//! | `block{i}.mlp.fc1`, `fc2`              | `d×hidden`, `hidden×d`  |
//! | `mask.norm.{gamma,beta}`               | `d`                     |
//! | `mask.g2i.{q,k,v,o}.{w,b}`             | `d×d`, `d` (no `k.b`)   |
//! | `mask.up1.{kernel,bias}`               | `d×d_mid×2×2`, `d_mid`  |
//! | `mask.up2.{kernel,bias}`               | `d_mid×d_up×2×2`, `d_up`|
//! | `mask.mlp.fc1`, `fc2`                  | `d×hidden`, `hidden×d_up` |

use rand::Rng;

use crate::align;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::ops::Activation;
use crate::params::{join, ParamStore, Scope};
use crate::tensor::Tensor;

pub const PREFIX: &str = "decoder";
const DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    /// Channels after the first transposed convolution.
    pub d_mid: usize,
    /// Per-pixel embedding width, matched by the gene query.
    pub d_up: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_mid: 16,
            d_up: 8,
            mlp_hidden: 64,
            blocks: 2,
        }
    }
}

pub fn init<R: Rng + ?Sized>(cfg: &DecoderConfig, rng: &mut R) -> Result<ParamStore> {
    if cfg.d_model == 0 || cfg.d_mid == 0 || cfg.d_up == 0 || cfg.mlp_hidden == 0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate decoder config {cfg:?}"
        )));
    }
    let mut s = ParamStore::new();
    let d = cfg.d_model;
    let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    for i in 0..cfg.blocks {
        let b = format!("{PREFIX}.block{i}");
        for k in 1..=4 {
            nn::init_norm(&mut s, &join(&b, &format!("norm{k}")), d);
        }
        for a in ["self_attn", "g2i", "i2g"] {
            nn::init_attention(&mut s, &join(&b, a), d, std(d), rng);
        }
        nn::init_linear(
            &mut s,
            &join(&b, "mlp.fc1"),
            d,
            cfg.mlp_hidden,
            std(d),
            true,
            rng,
        );
        nn::init_linear(
            &mut s,
            &join(&b, "mlp.fc2"),
            cfg.mlp_hidden,
            d,
            std(cfg.mlp_hidden),
            true,
            rng,
        );
    }
    let m = format!("{PREFIX}.mask");
    nn::init_norm(&mut s, &join(&m, "norm"), d);
    nn::init_attention(&mut s, &join(&m, "g2i"), d, std(d), rng);
    s.insert(
        join(&m, "up1.kernel"),
        Tensor::randn(&[d, cfg.d_mid, 2, 2], std(d), rng),
    );
    s.insert(join(&m, "up1.bias"), Tensor::zeros(&[cfg.d_mid]));
    s.insert(
        join(&m, "up2.kernel"),
        Tensor::randn(&[cfg.d_mid, cfg.d_up, 2, 2], std(cfg.d_mid), rng),
    );
    s.insert(join(&m, "up2.bias"), Tensor::zeros(&[cfg.d_up]));
    nn::init_linear(
        &mut s,
        &join(&m, "mlp.fc1"),
        d,
        cfg.mlp_hidden,
        std(d),
        true,
        rng,
    );
    nn::init_linear(
        &mut s,
        &join(&m, "mlp.fc2"),
        cfg.mlp_hidden,
        cfg.d_up,
        std(cfg.mlp_hidden),
        true,
        rng,
    );
    Ok(s)
}

fn check_widths(g: &Graph, genes: Var, image: Var) -> Result<(usize, usize, usize)> {
    let (t, dg) = g.value(genes).dims2()?;
    let (n, di) = g.value(image).dims2()?;
    if dg != di {
        return Err(Error::shape(
            "decoder",
            format!("gene width {dg} vs image width {di}"),
        ));
    }
    Ok((t, n, dg))
}

/// One four-step interaction block; `p` is the block scope. Returns the
/// updated `(genes, image)`.
pub fn attention_interaction(
    g: &mut Graph,
    p: &Scope<'_>,
    genes: Var,
    image: Var,
) -> Result<(Var, Var)> {
    check_widths(g, genes, image)?;
    let h = nn::layer_norm(g, &p.child("norm1"), genes)?;
    let a = nn::attend(g, &p.child("self_attn"), h, h, 1)?;
    let genes = g.add(genes, a)?;

    let h = nn::layer_norm(g, &p.child("norm2"), genes)?;
    let a = nn::attend(g, &p.child("g2i"), h, image, 1)?;
    let genes = g.add(genes, a)?;

    let h = nn::layer_norm(g, &p.child("norm3"), genes)?;
    let m = nn::mlp(g, &p.child("mlp"), h, Activation::Gelu)?;
    let genes = g.add(genes, m)?;

    let h = nn::layer_norm(g, &p.child("norm4"), image)?;
    let a = nn::attend(g, &p.child("i2g"), h, genes, 1)?;
    let image = g.add(image, a)?;
    Ok((genes, image))
}

/// Logit map `[out_h × out_w]` from gene tokens and row-major image tokens on
/// a `grid` of patches; `p` is the `decoder.mask` scope.
pub fn mask_output(
    g: &mut Graph,
    p: &Scope<'_>,
    genes: Var,
    image: Var,
    grid: (usize, usize),
    out: (usize, usize),
) -> Result<Var> {
    let (_, n, d) = check_widths(g, genes, image)?;
    if n != grid.0 * grid.1 {
        return Err(Error::shape(
            "mask_output",
            format!("{n} image tokens on a {}×{} grid", grid.0, grid.1),
        ));
    }
    let x = g.transpose(image)?;
    let x = g.reshape(x, &[d, grid.0, grid.1])?;
    let x = g.conv2d_transpose(x, p.var("up1.kernel")?, 2)?;
    let x = g.add_channel(x, p.var("up1.bias")?)?;
    let x = g.gelu(x)?;
    let x = g.conv2d_transpose(x, p.var("up2.kernel")?, 2)?;
    let x = g.add_channel(x, p.var("up2.bias")?)?;
    let d_up = g.value(x).shape()[0];
    let (uh, uw) = (4 * grid.0, 4 * grid.1);
    let pixels = g.reshape(x, &[d_up, uh * uw])?;

    let h = nn::layer_norm(g, &p.child("norm"), genes)?;
    let a = nn::attend(g, &p.child("g2i"), h, image, 1)?;
    let genes = g.add(genes, a)?;
    let pooled = align::mixed_pool(g, genes)?;
    let pooled = g.reshape(pooled, &[1, d])?;
    let q = nn::mlp(g, &p.child("mlp"), pooled, Activation::Gelu)?;

    let logits = g.matmul(q, pixels)?;
    let logits = g.reshape(logits, &[uh, uw])?;
    g.bilinear_resize(logits, out.0, out.1)
}

/// Interaction blocks followed by the mask output; `p` is the `decoder` scope.
pub fn decode_mask(
    g: &mut Graph,
    p: &Scope<'_>,
    cfg: &DecoderConfig,
    genes: Var,
    image: Var,
    grid: (usize, usize),
    out: (usize, usize),
) -> Result<Var> {
    let (mut gt, mut it) = (genes, image);
    for i in 0..cfg.blocks {
        (gt, it) = attention_interaction(g, &p.child(&format!("block{i}")), gt, it)?;
    }
    mask_output(g, &p.child("mask"), gt, it, grid, out)
}

fn check_mask(logits: &[usize], target: &Tensor) -> Result<()> {
    if logits != target.shape() {
        return Err(Error::shape(
            "dice",
            format!("{logits:?} vs {:?}", target.shape()),
        ));
    }
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
    }
    Ok(())
}

/// Soft Dice loss `1 − (2·Σpt + 1) / (Σp + Σt + 1)` with `p = σ(logits)`.
pub fn dice_loss(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    check_mask(g.value(logits).shape(), target)?;
    let p = g.sigmoid(logits)?;
    let t = g.constant(target.clone());
    let pt = g.mul(p, t)?;
    let inter = g.sum(pt)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let den = g.sum(p)?;
    let den = g.add_scalar(den, target.sum() + DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Soft Dice loss of explicit probabilities (no sigmoid).
pub fn dice_loss_probs(p: &Tensor, target: &Tensor) -> Result<f64> {
    check_mask(p.shape(), target)?;
    let inter: f64 = p.data().iter().zip(target.data()).map(|(a, b)| a * b).sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (p.sum() + target.sum() + DICE_EPS))
}

/// Hard mask at probability 0.5, i.e. `logit ≥ 0`.
pub fn threshold(logits: &Tensor) -> Tensor {
    logits.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
}

/// `2|P∩G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice_score(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_mask(pred.shape(), gt)?;
    check_mask(gt.shape(), pred)?;
    let inter: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| a * b).sum();
    let total = pred.sum() + gt.sum();
    Ok(if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    })
}

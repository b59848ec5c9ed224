//! Patch-attention image encoder. There is no class token: the output keeps
//! one token per patch in row-major grid order, so the fusion decoder can
//! fold it back into a spatial map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::ops::{self, Activation};
use crate::params::{join, ParamStore, Scope};
use crate::tensor::Tensor;

pub const PREFIX: &str = "image";

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub depth: usize,
    /// Standard deviation of the normal initialization of all projections.
    pub init_std: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            patch: 8,
            d_model: 32,
            heads: 4,
            mlp_hidden: 64,
            depth: 2,
            init_std: 0.02,
        }
    }
}

impl ViTConfig {
    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn token_count(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || !self.image_h.is_multiple_of(self.patch)
            || !self.image_w.is_multiple_of(self.patch)
        {
            return Err(Error::InvalidArgument(format!(
                "patch size {} must divide the {}×{} image",
                self.patch, self.image_h, self.image_w
            )));
        }
        if self.image_h == 0 || self.image_w == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

pub fn init<R: Rng + ?Sized>(cfg: &ViTConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let (d, std) = (cfg.d_model, cfg.init_std);
    nn::init_linear(
        &mut s,
        &join(PREFIX, "patch"),
        cfg.patch * cfg.patch,
        d,
        std,
        true,
        rng,
    );
    s.insert(join(PREFIX, "pos"), Tensor::zeros(&[cfg.token_count(), d]));
    for i in 0..cfg.depth {
        let b = format!("{PREFIX}.block{i}");
        nn::init_norm(&mut s, &join(&b, "ln1"), d);
        nn::init_attention(&mut s, &join(&b, "attn"), d, std, rng);
        nn::init_norm(&mut s, &join(&b, "ln2"), d);
        nn::init_mlp(&mut s, &join(&b, "mlp"), d, cfg.mlp_hidden, d, std, rng);
    }
    nn::init_norm(&mut s, &join(PREFIX, "final_norm"), d);
    Ok(s)
}

/// Cuts a `1×H×W` (or `H×W`) image into non-overlapping `P×P` patches,
/// one flattened row-major patch per row, patches in row-major grid order.
pub fn patches(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (h, w) = match image.shape()[..] {
        [h, w] | [1, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "patchify",
                format!("image {:?} is not 1×H×W", image.shape()),
            ))
        }
    };
    if (h, w) != (cfg.image_h, cfg.image_w) {
        return Err(Error::shape(
            "patchify",
            format!(
                "{h}×{w} image, config expects {}×{}",
                cfg.image_h, cfg.image_w
            ),
        ));
    }
    let p = cfg.patch;
    let (gr, gc) = cfg.grid();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..gr {
        for c in 0..gc {
            for i in 0..p {
                let row = (r * p + i) * w + c * p;
                out.extend_from_slice(&image.data()[row..row + p]);
            }
        }
    }
    Tensor::matrix(gr * gc, p * p, out)
}

/// Eager patch embedding: `patches · proj + bias + pos`.
pub fn patchify_eager(
    image: &Tensor,
    cfg: &ViTConfig,
    proj: &Tensor,
    bias: &Tensor,
    pos: &Tensor,
) -> Result<Tensor> {
    let mut t = ops::matmul(&patches(image, cfg)?, proj)?;
    let d = cfg.d_model;
    if bias.shape() != [d] || pos.shape() != [cfg.token_count(), d] {
        return Err(Error::shape(
            "patchify",
            format!("bias {:?}, pos {:?}", bias.shape(), pos.shape()),
        ));
    }
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % d] + pos.data()[i];
    }
    Ok(t)
}

/// Patch embedding on the tape; `p` is the `image` scope.
pub fn patchify(g: &mut Graph, p: &Scope<'_>, image: &Tensor, cfg: &ViTConfig) -> Result<Var> {
    let x = g.constant(patches(image, cfg)?);
    let t = nn::linear(g, &p.child("patch"), x)?;
    g.add(t, p.var("pos")?)
}

/// Multi-head self-attention; `p` is an attention scope (`…attn`).
pub fn mhsa(g: &mut Graph, p: &Scope<'_>, tokens: Var, heads: usize) -> Result<Var> {
    nn::attend(g, p, tokens, tokens, heads)
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn vit_block(g: &mut Graph, p: &Scope<'_>, tokens: Var, cfg: &ViTConfig) -> Result<Var> {
    let h = nn::layer_norm(g, &p.child("ln1"), tokens)?;
    let a = mhsa(g, &p.child("attn"), h, cfg.heads)?;
    let x = g.add(tokens, a)?;
    let h = nn::layer_norm(g, &p.child("ln2"), x)?;
    let m = nn::mlp(g, &p.child("mlp"), h, Activation::Gelu)?;
    g.add(x, m)
}

/// Image to `N×d_model` patch tokens; `p` is the `image` scope.
pub fn encode_image(g: &mut Graph, p: &Scope<'_>, image: &Tensor, cfg: &ViTConfig) -> Result<Var> {
    let mut x = patchify(g, p, image, cfg)?;
    for i in 0..cfg.depth {
        x = vit_block(g, &p.child(&format!("block{i}")), x, cfg)?;
    }
    nn::layer_norm(g, &p.child("final_norm"), x)
}

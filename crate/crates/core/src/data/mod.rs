//! Synthetic paired samples, dataset persistence and batching.
//!
//! Each sample is a 64×64 grayscale slice holding one to three elliptical
//! lesions, a gene-expression vector that linearly encodes the lesion
//! morphology, and the binary lesion mask. The lesions of a sample share a
//! genotype-dependent polarity (brighter or darker than the surrounding
//! tissue). Some samples also contain a benign look-alike of the opposite
//! polarity; it is drawn in the image but is absent from the mask and the
//! genes, so only the gene vector tells which blobs are lesions.

pub mod manifest;
pub mod mgit;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{batch_indices, build_dataset, Manifest, ManifestEntry, Split};
pub use mgit::{read_tensor, write_tensor};

/// Morphology values per lesion slot in the flattened vector.
pub const SLOT_WIDTH: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub n_genes: usize,
    /// Standard deviation of the additive gene noise.
    pub sigma: f64,
    /// Half-width of the uniform background noise.
    pub background_noise: f64,
    pub background_level: f64,
    pub max_lesions: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_contrast: f64,
    pub max_contrast: f64,
    /// Probability that a sample also contains a benign look-alike.
    pub benign_prob: f64,
    /// Subsamples per pixel side used for anti-aliasing.
    pub supersample: usize,
    pub n_samples: usize,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            n_genes: 1024,
            sigma: 0.1,
            background_noise: 0.1,
            background_level: 0.5,
            max_lesions: 3,
            min_radius: 4.0,
            max_radius: 10.0,
            min_contrast: 0.2,
            max_contrast: 0.4,
            benign_prob: 0.5,
            supersample: 4,
            n_samples: 640,
            train_fraction: 0.8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_h == 0 || self.image_w == 0 || self.n_genes == 0 {
            return bad("image size and n_genes must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!(
                "gene noise must be non-negative, got {}",
                self.sigma
            ));
        }
        if self.max_lesions == 0 {
            return bad("max_lesions must be positive".into());
        }
        if !(self.min_radius >= 2.0 && self.max_radius >= self.min_radius) {
            return bad(format!(
                "radii must satisfy 2 ≤ min ≤ max, got {}..{}",
                self.min_radius, self.max_radius
            ));
        }
        let fit = 2.0 * self.max_radius + 2.0;
        if fit > self.image_h as f64 || fit > self.image_w as f64 {
            return bad(format!(
                "a lesion of radius {} does not fit the image",
                self.max_radius
            ));
        }
        if !(0.0 <= self.min_contrast && self.min_contrast <= self.max_contrast) {
            return bad("contrast range must satisfy 0 ≤ min ≤ max".into());
        }
        if !(0.0..=1.0).contains(&self.benign_prob) || !(0.0..=1.0).contains(&self.background_level)
        {
            return bad("benign_prob and background_level must lie in [0, 1]".into());
        }
        if !(self.background_noise >= 0.0) || self.supersample == 0 {
            return bad("background noise must be non-negative and supersample positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        Ok(())
    }

    /// Length of the flattened morphology vector θ.
    pub fn theta_dim(&self) -> usize {
        2 + SLOT_WIDTH * self.max_lesions
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major radius, `a ≥ b`.
    pub a: f64,
    pub b: f64,
    /// Rotation of the major axis in `[0, π)`.
    pub angle: f64,
    /// Absolute intensity offset from the background.
    pub contrast: f64,
}

impl Ellipse {
    /// Pixel coordinates run over `[0, W] × [0, H]`; pixel `(r, c)` has its
    /// center at `(c + 0.5, r + 0.5)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let hx = (self.a * self.a * c * c + self.b * self.b * s * s).sqrt();
        let hy = (self.a * self.a * s * s + self.b * self.b * c * c).sqrt();
        (hx, hy)
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorphologyParams {
    pub lesions: Vec<Ellipse>,
    /// `+1` for lesions brighter than the background, `-1` for darker.
    pub polarity: f64,
    pub benign: Option<Ellipse>,
}

impl MorphologyParams {
    /// The zero-padded flattened vector θ that the genes express. Slots
    /// follow the lesion order, largest area first.
    ///
    /// Layout: lesion count / max, polarity, then per slot: present, center
    /// (x, y) relative to the image middle, both radii, area, cos 2φ, sin 2φ
    /// and contrast, each scaled to order one.
    pub fn theta(&self, cfg: &DataConfig) -> Vec<f64> {
        let mut t = vec![0.0; cfg.theta_dim()];
        t[0] = self.lesions.len() as f64 / cfg.max_lesions as f64;
        t[1] = self.polarity;
        let r = cfg.max_radius;
        for (i, e) in self.lesions.iter().enumerate() {
            let s = &mut t[2 + i * SLOT_WIDTH..2 + (i + 1) * SLOT_WIDTH];
            s[0] = 1.0;
            s[1] = e.cx / cfg.image_w as f64 - 0.5;
            s[2] = e.cy / cfg.image_h as f64 - 0.5;
            s[3] = e.a / r;
            s[4] = e.b / r;
            s[5] = e.area() / (PI * r * r);
            s[6] = (2.0 * e.angle).cos();
            s[7] = (2.0 * e.angle).sin();
            s[8] = e.contrast;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub sample_id: String,
    /// `[1×H×W]` with values in `[0, 1]`.
    pub image: Tensor,
    /// `[n_genes]`.
    pub genes: Tensor,
    /// Binary `[H×W]`.
    pub mask: Tensor,
}

/// Mixing matrix from morphology to gene expression.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneMixer {
    /// `[n_genes × k]`, standard normal entries.
    pub w: Tensor,
    pub sigma: f64,
}

impl GeneMixer {
    pub fn new(cfg: &DataConfig, master_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, "mixer", 0));
        let w = Tensor::randn(&[cfg.n_genes, cfg.theta_dim()], 1.0, &mut rng);
        Ok(Self {
            w,
            sigma: cfg.sigma,
        })
    }

    /// `W·θ + N(0, σ²)` per gene.
    pub fn express<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<Tensor> {
        let (n, k) = self.w.dims2()?;
        if theta.len() != k {
            return Err(Error::shape(
                "express",
                format!("θ has {} entries, mixer expects {k}", theta.len()),
            ));
        }
        let noise =
            Normal::new(0.0, self.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let out = (0..n)
            .map(|i| {
                let clean: f64 = self.w.row(i).iter().zip(theta).map(|(w, t)| w * t).sum();
                clean + noise.sample(rng)
            })
            .collect();
        Tensor::vector(out)
    }
}

/// A 64-bit seed derived from `(master, label, index)` through SHA-256.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn draw_ellipse<R: Rng + ?Sized>(cfg: &DataConfig, contrast: f64, rng: &mut R) -> Ellipse {
    let r1 = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let r2 = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let mut e = Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: r1.max(r2),
        b: r1.min(r2),
        angle: rng.random_range(0.0..PI),
        contrast,
    };
    let (hx, hy) = e.half_extent();
    e.cx = rng.random_range(hx + 0.5..=cfg.image_w as f64 - hx - 0.5);
    e.cy = rng.random_range(hy + 0.5..=cfg.image_h as f64 - hy - 0.5);
    e
}

fn separated(e: &Ellipse, others: &[Ellipse]) -> bool {
    others
        .iter()
        .all(|o| (e.cx - o.cx).hypot(e.cy - o.cy) > e.a + o.a + 2.0)
}

/// Draws lesions that lie inside the image and do not touch each other or
/// the benign blob.
pub fn sample_morphology<R: Rng + ?Sized>(cfg: &DataConfig, rng: &mut R) -> MorphologyParams {
    const ATTEMPTS: usize = 200;
    let count = rng.random_range(1..=cfg.max_lesions);
    let polarity = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let with_benign = rng.random_bool(cfg.benign_prob);
    let mut placed: Vec<Ellipse> = Vec::with_capacity(count + 1);
    let place = |placed: &[Ellipse], rng: &mut R| {
        for _ in 0..ATTEMPTS {
            let c = rng.random_range(cfg.min_contrast..=cfg.max_contrast);
            let e = draw_ellipse(cfg, c, rng);
            if separated(&e, placed) {
                return Some(e);
            }
        }
        None
    };
    for _ in 0..count {
        if let Some(e) = place(&placed, rng) {
            placed.push(e);
        }
    }
    let benign = if with_benign {
        place(&placed, rng)
    } else {
        None
    };
    placed.sort_by(|x, y| y.area().total_cmp(&x.area()));
    MorphologyParams {
        lesions: placed,
        polarity,
        benign,
    }
}

/// Renders the image and the lesion mask. Blob coverage is estimated with
/// `supersample²` points per pixel; the mask holds pixels whose center lies
/// inside a lesion.
pub fn render<R: Rng + ?Sized>(
    m: &MorphologyParams,
    cfg: &DataConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = (cfg.image_h, cfg.image_w);
    let s = cfg.supersample;
    let step = 1.0 / s as f64;
    let mut image = vec![0.0; h * w];
    let mut mask = vec![0.0; h * w];
    let blobs: Vec<(Ellipse, f64)> = m
        .lesions
        .iter()
        .map(|e| (*e, m.polarity))
        .chain(m.benign.iter().map(|e| (*e, -m.polarity)))
        .collect();
    for r in 0..h {
        for c in 0..w {
            let noise = cfg.background_noise * rng.random_range(-1.0..=1.0);
            let (x, y) = (c as f64, r as f64);
            let mut v = cfg.background_level + noise;
            for (e, sign) in &blobs {
                let (hx, hy) = e.half_extent();
                if (x + 0.5 - e.cx).abs() > hx + 1.0 || (y + 0.5 - e.cy).abs() > hy + 1.0 {
                    continue;
                }
                let mut inside = 0usize;
                for i in 0..s {
                    for j in 0..s {
                        let px = x + (j as f64 + 0.5) * step;
                        let py = y + (i as f64 + 0.5) * step;
                        inside += usize::from(e.contains(px, py));
                    }
                }
                v += sign * e.contrast * inside as f64 / (s * s) as f64;
            }
            image[r * w + c] = v.clamp(0.0, 1.0);
            if m.lesions.iter().any(|e| e.contains(x + 0.5, y + 0.5)) {
                mask[r * w + c] = 1.0;
            }
        }
    }
    Ok((
        Tensor::new(vec![1, h, w], image)?,
        Tensor::new(vec![h, w], mask)?,
    ))
}

/// Generates one sample from its own seed.
pub fn gen_synthetic_pair(
    seed: u64,
    sample_id: &str,
    cfg: &DataConfig,
    mixer: &GeneMixer,
) -> Result<(PairedSample, MorphologyParams)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let morph = sample_morphology(cfg, &mut rng);
    let (image, mask) = render(&morph, cfg, &mut rng)?;
    let genes = mixer.express(&morph.theta(cfg), &mut rng)?;
    let sample = PairedSample {
        sample_id: sample_id.to_string(),
        image,
        genes,
        mask,
    };
    Ok((sample, morph))
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

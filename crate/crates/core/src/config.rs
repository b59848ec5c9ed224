//! Run configuration as line-oriented `key = value` text.
//!
//! Keys are dotted (`pretrain.lr`, `align.tau`); `#` starts a comment line.
//! Every key has a default, so an empty file is a valid configuration, and
//! [`RunConfig::to_text`] writes every key so a saved file is complete.
//!
//! The extents shared between modules (`data.n_genes`, `data.image_h`,
//! `data.image_w`, `model.d_model`) are stored once; [`RunConfig::gene`],
//! [`RunConfig::vit`] and [`RunConfig::decoder`] return module configs with
//! these filled in.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::align::{AlignConfig, LossVariant};
use crate::data::DataConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::gene::GeneConfig;
use crate::image::ViTConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            epochs: 20,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// Keep encoder and projection weights fixed.
    pub freeze_encoders: bool,
    /// Replace the gene tokens by zeros (image-only ablation).
    pub zero_genes: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data_dir: PathBuf,
    /// Worker threads for data generation and evaluation.
    pub threads: usize,
    pub d_model: usize,
    /// Z-score every image before it enters the model.
    pub standardize_images: bool,
    pub data: DataConfig,
    pub gene: GeneConfig,
    pub image: ViTConfig,
    pub align: AlignConfig,
    pub decoder: DecoderConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs".into(),
            data_dir: "data".into(),
            threads: 1,
            d_model: 32,
            standardize_images: true,
            data: DataConfig::default(),
            gene: GeneConfig::default(),
            image: ViTConfig::default(),
            align: AlignConfig::default(),
            decoder: DecoderConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    pub fn gene(&self) -> GeneConfig {
        GeneConfig {
            n_genes: self.data.n_genes,
            d_model: self.d_model,
            ..self.gene.clone()
        }
    }

    pub fn vit(&self) -> ViTConfig {
        ViTConfig {
            image_h: self.data.image_h,
            image_w: self.data.image_w,
            d_model: self.d_model,
            ..self.image.clone()
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            ..self.decoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.gene().validate()?;
        self.vit().validate()?;
        self.align.validate()?;
        for (name, t) in [
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune.train),
        ] {
            if !(t.lr > 0.0 && t.lr.is_finite())
                || !(0.0..1.0).contains(&t.momentum)
                || t.batch_size == 0
            {
                return Err(Error::Config(format!(
                    "{name}: invalid optimizer settings {t:?}"
                )));
            }
        }
        if self.pretrain.batch_size < 2 {
            return Err(Error::Config(
                "pretrain.batch_size must be at least 2".into(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = v.into(),
            "threads" => self.threads = parse(key, v)?,
            "model.d_model" => self.d_model = parse(key, v)?,
            "data.dir" => self.data_dir = v.into(),
            "data.image_h" => self.data.image_h = parse(key, v)?,
            "data.image_w" => self.data.image_w = parse(key, v)?,
            "data.n_genes" => self.data.n_genes = parse(key, v)?,
            "data.sigma" => self.data.sigma = parse(key, v)?,
            "data.background_noise" => self.data.background_noise = parse(key, v)?,
            "data.background_level" => self.data.background_level = parse(key, v)?,
            "data.max_lesions" => self.data.max_lesions = parse(key, v)?,
            "data.min_radius" => self.data.min_radius = parse(key, v)?,
            "data.max_radius" => self.data.max_radius = parse(key, v)?,
            "data.min_contrast" => self.data.min_contrast = parse(key, v)?,
            "data.max_contrast" => self.data.max_contrast = parse(key, v)?,
            "data.benign_prob" => self.data.benign_prob = parse(key, v)?,
            "data.supersample" => self.data.supersample = parse(key, v)?,
            "data.n_samples" => self.data.n_samples = parse(key, v)?,
            "data.train_fraction" => self.data.train_fraction = parse(key, v)?,
            "gene.chunk_size" => self.gene.chunk_size = parse(key, v)?,
            "gene.d_inner" => self.gene.d_inner = parse(key, v)?,
            "gene.d_state" => self.gene.d_state = parse(key, v)?,
            "gene.conv_kernel" => self.gene.conv_kernel = parse(key, v)?,
            "gene.depth" => self.gene.depth = parse(key, v)?,
            "gene.scan" => self.gene.scan = parse(key, v)?,
            "image.standardize" => self.standardize_images = parse(key, v)?,
            "image.patch" => self.image.patch = parse(key, v)?,
            "image.heads" => self.image.heads = parse(key, v)?,
            "image.mlp_hidden" => self.image.mlp_hidden = parse(key, v)?,
            "image.depth" => self.image.depth = parse(key, v)?,
            "image.init_std" => self.image.init_std = parse(key, v)?,
            "align.d_feat" => self.align.d_feat = parse(key, v)?,
            "align.tau" => self.align.tau = parse(key, v)?,
            "align.learn_tau" => self.align.learn_tau = parse(key, v)?,
            "align.loss_variant" => self.align.variant = parse::<LossVariant>(key, v)?,
            "decoder.d_mid" => self.decoder.d_mid = parse(key, v)?,
            "decoder.d_up" => self.decoder.d_up = parse(key, v)?,
            "decoder.mlp_hidden" => self.decoder.mlp_hidden = parse(key, v)?,
            "decoder.blocks" => self.decoder.blocks = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.momentum" => self.pretrain.momentum = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "finetune.lr" => self.finetune.train.lr = parse(key, v)?,
            "finetune.momentum" => self.finetune.train.momentum = parse(key, v)?,
            "finetune.epochs" => self.finetune.train.epochs = parse(key, v)?,
            "finetune.batch_size" => self.finetune.train.batch_size = parse(key, v)?,
            "finetune.freeze_encoders" => self.finetune.freeze_encoders = parse(key, v)?,
            "finetune.zero_genes" => self.finetune.zero_genes = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let (g, i, a, dec, p, f) = (
            &self.gene,
            &self.image,
            &self.align,
            &self.decoder,
            &self.pretrain,
            &self.finetune,
        );
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("threads", self.threads.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            ("data.image_h", d.image_h.to_string()),
            ("data.image_w", d.image_w.to_string()),
            ("data.n_genes", d.n_genes.to_string()),
            ("data.sigma", d.sigma.to_string()),
            ("data.background_noise", d.background_noise.to_string()),
            ("data.background_level", d.background_level.to_string()),
            ("data.max_lesions", d.max_lesions.to_string()),
            ("data.min_radius", d.min_radius.to_string()),
            ("data.max_radius", d.max_radius.to_string()),
            ("data.min_contrast", d.min_contrast.to_string()),
            ("data.max_contrast", d.max_contrast.to_string()),
            ("data.benign_prob", d.benign_prob.to_string()),
            ("data.supersample", d.supersample.to_string()),
            ("data.n_samples", d.n_samples.to_string()),
            ("data.train_fraction", d.train_fraction.to_string()),
            ("gene.chunk_size", g.chunk_size.to_string()),
            ("gene.d_inner", g.d_inner.to_string()),
            ("gene.d_state", g.d_state.to_string()),
            ("gene.conv_kernel", g.conv_kernel.to_string()),
            ("gene.depth", g.depth.to_string()),
            ("gene.scan", g.scan.to_string()),
            ("image.standardize", self.standardize_images.to_string()),
            ("image.patch", i.patch.to_string()),
            ("image.heads", i.heads.to_string()),
            ("image.mlp_hidden", i.mlp_hidden.to_string()),
            ("image.depth", i.depth.to_string()),
            ("image.init_std", i.init_std.to_string()),
            ("align.d_feat", a.d_feat.to_string()),
            ("align.tau", a.tau.to_string()),
            ("align.learn_tau", a.learn_tau.to_string()),
            ("align.loss_variant", a.variant.to_string()),
            ("decoder.d_mid", dec.d_mid.to_string()),
            ("decoder.d_up", dec.d_up.to_string()),
            ("decoder.mlp_hidden", dec.mlp_hidden.to_string()),
            ("decoder.blocks", dec.blocks.to_string()),
            ("pretrain.lr", p.lr.to_string()),
            ("pretrain.momentum", p.momentum.to_string()),
            ("pretrain.epochs", p.epochs.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("finetune.lr", f.train.lr.to_string()),
            ("finetune.momentum", f.train.momentum.to_string()),
            ("finetune.epochs", f.train.epochs.to_string()),
            ("finetune.batch_size", f.train.batch_size.to_string()),
            ("finetune.freeze_encoders", f.freeze_encoders.to_string()),
            ("finetune.zero_genes", f.zero_genes.to_string()),
        ]
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let s = k.split_once('.').map_or("", |(s, _)| s);
            if s != section && !out.is_empty() {
                out.push('\n');
            }
            section = s;
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

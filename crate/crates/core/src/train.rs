//! Full-model forward passes and the pretrain / finetune / evaluate
//! workflows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::align;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{batch_indices, derive_seed, PairedSample};
use crate::decoder;
use crate::error::{Error, Result};
use crate::gene::{self, GeneStats};
use crate::graph::{Graph, Var};
use crate::image;
use crate::params::{Bindings, ParamStore, Sgd};
use crate::tensor::Tensor;

/// A sample after gene standardization and optional image z-scoring.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample_id: String,
    pub genes: Vec<f64>,
    pub image: Tensor,
    pub mask: Tensor,
}

/// Standardizes genes with `stats` and, if `standardize_images`, z-scores
/// each image.
pub fn prepare(
    samples: &[PairedSample],
    stats: &GeneStats,
    standardize_images: bool,
) -> Vec<Prepared> {
    samples
        .iter()
        .map(|s| Prepared {
            sample_id: s.sample_id.clone(),
            genes: stats.apply(s.genes.data()),
            image: if standardize_images {
                standardize_image(&s.image)
            } else {
                s.image.clone()
            },
            mask: s.mask.clone(),
        })
        .collect()
}

/// Per-image z-scoring of intensities; a constant image maps to zeros.
pub fn standardize_image(image: &Tensor) -> Tensor {
    let n = image.numel() as f64;
    let mean = image.sum() / n;
    let var = image
        .data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return image.map(|_| 0.0);
    }
    image.map(|v| (v - mean) / sd)
}

pub fn fit_stats(train: &[PairedSample]) -> Result<GeneStats> {
    GeneStats::fit(train.iter().map(|s| s.genes.data()))
}

/// Fresh gene encoder, image encoder and projection heads.
pub fn init_encoders(cfg: &RunConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let rng = |label: &str| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, label, 0));
    let mut p = gene::init(&cfg.gene(), &mut rng("init.gene"))?;
    p.extend(image::init(&cfg.vit(), &mut rng("init.image"))?);
    p.extend(align::init(
        &cfg.align,
        cfg.d_model,
        &mut rng("init.align"),
    )?);
    Ok(p)
}

pub fn init_decoder(cfg: &RunConfig) -> Result<ParamStore> {
    decoder::init(
        &cfg.decoder(),
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init.decoder", 0)),
    )
}

/// Gene and image tokens of one sample.
pub fn encode_pair(
    g: &mut Graph,
    b: &Bindings,
    cfg: &RunConfig,
    s: &Prepared,
) -> Result<(Var, Var)> {
    let genes = gene::encode_genes(g, &b.scope(gene::PREFIX), &s.genes, &cfg.gene())?;
    let img = image::encode_image(g, &b.scope(image::PREFIX), &s.image, &cfg.vit())?;
    Ok((genes, img))
}

/// Unit-norm image and gene features `[B×d_feat]` of a batch.
pub fn batch_features(
    g: &mut Graph,
    b: &Bindings,
    cfg: &RunConfig,
    batch: &[&Prepared],
) -> Result<(Var, Var)> {
    let mut ip = Vec::with_capacity(batch.len());
    let mut gp = Vec::with_capacity(batch.len());
    for s in batch {
        let (gt, it) = encode_pair(g, b, cfg, s)?;
        ip.push(align::mixed_pool(g, it)?);
        gp.push(align::mixed_pool(g, gt)?);
    }
    let ip = g.stack(&ip)?;
    let gp = g.stack(&gp)?;
    let a = b.scope(align::PREFIX);
    let i = align::project_features(g, &a.child("image_proj"), ip)?;
    let gf = align::project_features(g, &a.child("gene_proj"), gp)?;
    Ok((i, gf))
}

/// Similarity matrix with the fixed or learned temperature.
pub fn similarity(g: &mut Graph, b: &Bindings, cfg: &RunConfig, i: Var, gf: Var) -> Result<Var> {
    match b.scope(align::PREFIX).opt_var("log_tau") {
        Some(log_tau) if cfg.align.learn_tau => align::similarity_matrix_learned(g, i, gf, log_tau),
        _ => align::similarity_matrix(g, i, gf, cfg.align.tau),
    }
}

pub fn contrastive_loss(
    g: &mut Graph,
    b: &Bindings,
    cfg: &RunConfig,
    batch: &[&Prepared],
) -> Result<Var> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least two pairs".into(),
        ));
    }
    let (i, gf) = batch_features(g, b, cfg, batch)?;
    let s = similarity(g, b, cfg, i, gf)?;
    align::contrastive_loss(g, s, cfg.align.variant)
}

/// Mask logits `[H×W]`; with `zero_genes` the gene tokens are zeros.
pub fn mask_logits(
    g: &mut Graph,
    b: &Bindings,
    cfg: &RunConfig,
    s: &Prepared,
    zero_genes: bool,
) -> Result<Var> {
    let vit = cfg.vit();
    let img = image::encode_image(g, &b.scope(image::PREFIX), &s.image, &vit)?;
    let genes = if zero_genes {
        g.constant(Tensor::zeros(&[cfg.gene().token_count(), cfg.d_model]))
    } else {
        gene::encode_genes(g, &b.scope(gene::PREFIX), &s.genes, &cfg.gene())?
    };
    let out = (cfg.data.image_h, cfg.data.image_w);
    decoder::decode_mask(
        g,
        &b.scope(decoder::PREFIX),
        &cfg.decoder(),
        genes,
        img,
        vit.grid(),
        out,
    )
}

/// Mean soft Dice loss over a batch.
pub fn segmentation_loss(
    g: &mut Graph,
    b: &Bindings,
    cfg: &RunConfig,
    batch: &[&Prepared],
    zero_genes: bool,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in batch {
        let logits = mask_logits(g, b, cfg, s, zero_genes)?;
        let l = decoder::dice_loss(g, logits, &s.mask)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    g.scale(total, 1.0 / batch.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean loss of every epoch, in order.
    pub epoch_losses: Vec<f64>,
}

struct Schedule<'a> {
    stage: &'a str,
    seed: u64,
    n: usize,
    batch: usize,
    epochs: usize,
    drop_last: bool,
}

type BatchLoss<'a> = dyn Fn(&mut Graph, &Bindings, &[usize]) -> Result<Var> + 'a;

struct Loop<'a> {
    params: ParamStore,
    opt: Sgd,
    history: Vec<f64>,
    epoch_losses: Vec<f64>,
    log: &'a mut dyn FnMut(&str),
}

impl Loop<'_> {
    fn run(
        &mut self,
        sc: Schedule<'_>,
        trainable: &dyn Fn(&str) -> bool,
        loss_fn: &BatchLoss<'_>,
    ) -> Result<()> {
        for epoch in 0..sc.epochs {
            let seed = derive_seed(sc.seed, sc.stage, epoch as u64);
            let order = batch_indices(sc.n, sc.batch, seed, sc.drop_last)?;
            let mut sum = 0.0;
            for idx in &order {
                let mut g = Graph::new();
                let b = self.params.bind(&mut g, trainable);
                let loss = loss_fn(&mut g, &b, idx)?;
                let value = g.value(loss).item()?;
                let grads = b.gradients(&g.backward(loss)?);
                self.opt.step(&mut self.params, &grads)?;
                align::clamp_log_tau(&mut self.params);
                self.history.push(value);
                sum += value;
            }
            let mean = sum / order.len() as f64;
            self.epoch_losses.push(mean);
            (self.log)(&format!(
                "{}\tepoch {}\tloss {mean:.6}",
                sc.stage,
                epoch + 1
            ));
        }
        Ok(())
    }
}

/// Contrastive pretraining of both encoders and the projection heads.
pub fn pretrain(
    cfg: &RunConfig,
    train: &[PairedSample],
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < cfg.pretrain.batch_size {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds the {} training pairs",
            cfg.pretrain.batch_size,
            train.len()
        )));
    }
    let stats = fit_stats(train)?;
    let data = prepare(train, &stats, cfg.standardize_images);
    let mut l = Loop {
        params: init_encoders(cfg)?,
        opt: Sgd::new(cfg.pretrain.lr, cfg.pretrain.momentum),
        history: Vec::new(),
        epoch_losses: Vec::new(),
        log,
    };
    let t = &cfg.pretrain;
    let sc = Schedule {
        stage: "pretrain",
        seed: cfg.seed,
        n: data.len(),
        batch: t.batch_size,
        epochs: t.epochs,
        drop_last: true,
    };
    l.run(sc, &|_| true, &|g, b, idx| {
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &data[i]).collect();
        contrastive_loss(g, b, cfg, &batch)
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            params: l.params,
            stats,
            stage: "pretrain".into(),
            step: l.history.len() as u64,
            loss_history: l.history,
        },
        epoch_losses: l.epoch_losses,
    })
}

/// Adds a fresh decoder to a pretrained checkpoint and trains it with the
/// Dice loss. Encoder shapes in `from` must match `cfg`.
pub fn finetune(
    cfg: &RunConfig,
    from: &Checkpoint,
    train: &[PairedSample],
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    from.check_shapes(&init_encoders(cfg)?)?;
    if from.stats.mean.len() != cfg.data.n_genes {
        return Err(Error::Checkpoint(
            "gene statistics do not match data.n_genes".into(),
        ));
    }
    let mut params = from.params.clone();
    if from.has_decoder() {
        from.check_shapes(&init_decoder(cfg)?)?;
    } else {
        params.extend(init_decoder(cfg)?);
    }
    let data = prepare(train, &from.stats, cfg.standardize_images);
    let ft = &cfg.finetune;
    let freeze = ft.freeze_encoders;
    let zero = ft.zero_genes;
    let mut l = Loop {
        params,
        opt: Sgd::new(ft.train.lr, ft.train.momentum),
        history: Vec::new(),
        epoch_losses: Vec::new(),
        log,
    };
    let trainable = move |name: &str| {
        name.starts_with("decoder.")
            || (!freeze && !name.starts_with("align.") && !(zero && name.starts_with("gene.")))
    };
    let sc = Schedule {
        stage: "finetune",
        seed: cfg.seed,
        n: data.len(),
        batch: ft.train.batch_size.min(data.len()),
        epochs: ft.train.epochs,
        drop_last: false,
    };
    l.run(sc, &trainable, &|g, b, idx| {
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &data[i]).collect();
        segmentation_loss(g, b, cfg, &batch, zero)
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            params: l.params,
            stats: from.stats.clone(),
            stage: "finetune".into(),
            step: l.history.len() as u64,
            loss_history: l.history,
        },
        epoch_losses: l.epoch_losses,
    })
}

/// Unit-norm features of every sample, computed independently per sample.
pub fn features(ckpt: &Checkpoint, samples: &[Prepared]) -> Result<(Tensor, Tensor)> {
    let cfg = &ckpt.config;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let b = ckpt.params.bind(&mut g, |_| false);
            let (i, gf) = batch_features(&mut g, &b, cfg, &[s])?;
            Ok((g.value(i).data().to_vec(), g.value(gf).data().to_vec()))
        })
        .collect::<Result<_>>()?;
    let f = cfg.align.d_feat;
    let n = rows.len();
    let i = Tensor::matrix(
        n,
        f,
        rows.iter().flat_map(|r| r.0.iter().copied()).collect(),
    )?;
    let g = Tensor::matrix(
        n,
        f,
        rows.iter().flat_map(|r| r.1.iter().copied()).collect(),
    )?;
    Ok((i, g))
}

/// Fraction of rows whose diagonal entry is among the `k` largest of the
/// row; ties count against the match.
pub fn recall_at_k(s: &Tensor, k: usize) -> Result<f64> {
    let (n, m) = s.dims2()?;
    if n != m || n == 0 {
        return Err(Error::shape("recall", format!("{n}×{m} similarity matrix")));
    }
    let hits = (0..n)
        .filter(|&r| {
            let row = s.row(r);
            row.iter().filter(|&&v| v >= row[r]).count() <= k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub split: String,
    pub n: usize,
    pub recall1_gene_to_image: f64,
    pub recall5_gene_to_image: f64,
    pub recall1_image_to_gene: f64,
    pub recall5_image_to_gene: f64,
    /// Mean hard Dice; absent for checkpoints without a decoder.
    pub dice: Option<f64>,
}

impl Metrics {
    pub fn to_tsv(&self) -> String {
        let dice = self.dice.map_or("NA".to_string(), |d| format!("{d:.6}"));
        let rows = [
            ("split", self.split.clone()),
            ("n", self.n.to_string()),
            (
                "recall@1_gene_to_image",
                format!("{:.6}", self.recall1_gene_to_image),
            ),
            (
                "recall@5_gene_to_image",
                format!("{:.6}", self.recall5_gene_to_image),
            ),
            (
                "recall@1_image_to_gene",
                format!("{:.6}", self.recall1_image_to_gene),
            ),
            (
                "recall@5_image_to_gene",
                format!("{:.6}", self.recall5_image_to_gene),
            ),
            ("dice", dice),
        ];
        let mut out = String::from("metric\tvalue\n");
        for (k, v) in rows {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        out
    }
}

/// Hard masks predicted for every sample, in order.
pub fn predict_masks(ckpt: &Checkpoint, samples: &[Prepared]) -> Result<Vec<Tensor>> {
    let cfg = &ckpt.config;
    let zero = cfg.finetune.zero_genes;
    samples
        .par_iter()
        .map(|s| {
            let logits = ckpt
                .params
                .evaluate(|g, b| mask_logits(g, b, cfg, s, zero))?;
            Ok(decoder::threshold(&logits))
        })
        .collect()
}

/// Retrieval recall in both directions and, when the checkpoint has a
/// decoder, the mean hard Dice score.
pub fn evaluate(ckpt: &Checkpoint, samples: &[PairedSample], split: &str) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let data = prepare(samples, &ckpt.stats, ckpt.config.standardize_images);
    let (i, g) = features(ckpt, &data)?;
    let s = align::similarity_eager(&i, &g, 1.0)?;
    let st = s.transpose2()?;
    let dice = if ckpt.has_decoder() {
        let masks = predict_masks(ckpt, &data)?;
        let scores = masks
            .iter()
            .zip(&data)
            .map(|(p, d)| decoder::dice_score(p, &d.mask))
            .collect::<Result<Vec<_>>>()?;
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    } else {
        None
    };
    Ok(Metrics {
        split: split.to_string(),
        n: data.len(),
        recall1_gene_to_image: recall_at_k(&st, 1)?,
        recall5_gene_to_image: recall_at_k(&st, 5)?,
        recall1_image_to_gene: recall_at_k(&s, 1)?,
        recall5_image_to_gene: recall_at_k(&s, 5)?,
        dice,
    })
}

/// Loss of one batch under the initial parameters.
pub fn initial_loss(cfg: &RunConfig, batch: &[PairedSample]) -> Result<f64> {
    let stats = fit_stats(batch)?;
    let data = prepare(batch, &stats, cfg.standardize_images);
    let refs: Vec<&Prepared> = data.iter().collect();
    let params = init_encoders(cfg)?;
    params
        .evaluate(|g, b| contrastive_loss(g, b, cfg, &refs))?
        .item()
}

//! The verification suite behind `mgi verify`: finite-difference checks of
//! every block, scan equivalence, loss analytics, container roundtrips and a
//! deliberately broken backward rule that the gradient check must catch.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{self, AlignConfig, LossVariant};
use crate::config::RunConfig;
use crate::data::{derive_seed, mgit};
use crate::decoder::{self, DecoderConfig};
use crate::error::Result;
use crate::gene::{self, GeneConfig};
use crate::gradcheck::{
    check_graph_gradients, check_graph_gradients_with, GradCheckOptions, GradCheckReport,
};
use crate::graph::{BackwardFault, Graph, Var};
use crate::image::{self, ViTConfig};
use crate::params::{Bindings, ParamStore};
use crate::scan::{self, ScanInputs, ScanMode};
use crate::tensor::Tensor;
use crate::train::{self, Prepared};

pub const GRAD_TOL: f64 = 1e-4;
pub const SCAN_TOL: f64 = 1e-10;

const ENCODER_JITTER: f64 = 0.5;
const DECODER_JITTER: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\tmax_err={:.3e}\ttol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, "\t{}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(
        &mut self,
        name: impl Into<String>,
        max_error: f64,
        tolerance: f64,
        detail: impl Into<String>,
    ) {
        self.checks.push(Check {
            name: name.into(),
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            detail: detail.into(),
        });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

/// Parameters moved off their structured initialization by Gaussian noise,
/// `scale/√fan_in` for matrices and kernels (leading axis is fan-in) and
/// `0.6·scale` for vectors; step-size biases are redrawn in `U(−1, 1)`. Many
/// gradients at the init itself sit below finite-difference resolution,
/// while large noise drives the mask logits deep into sigmoid saturation.
pub fn generic_point<R: Rng + ?Sized>(
    params: &ParamStore,
    scale: f64,
    rng: &mut R,
) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, t) in params.iter() {
        let v = if name.ends_with(".dt.b") {
            Tensor::uniform(t.shape(), -1.0, 1.0, rng)
        } else {
            let std = match t.shape() {
                [fan_in, _, ..] => scale / (*fan_in as f64).sqrt(),
                _ => 0.6 * scale,
            };
            let n = Tensor::randn(t.shape(), std, rng);
            let data = t.data().iter().zip(n.data()).map(|(a, b)| a + b).collect();
            Tensor::new(t.shape().to_vec(), data)?
        };
        out.insert(name, v);
    }
    Ok(out)
}

/// Fixed random linear readout `Σ w ⊙ t`, so every output coordinate
/// carries gradient.
fn readout(g: &mut Graph, t: Var) -> Result<Var> {
    let w = Tensor::randn(
        g.value(t).shape(),
        1.0,
        &mut ChaCha8Rng::seed_from_u64(0x5eed),
    );
    let w = g.constant(w);
    let p = g.mul(t, w)?;
    g.sum(p)
}

/// Architecture at reduced width, small enough to check every coordinate.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig {
        d_model: 8,
        ..RunConfig::default()
    };
    c.data.n_genes = 64;
    c.data.image_h = 16;
    c.data.image_w = 16;
    c.data.max_radius = 5.0;
    c.gene = GeneConfig {
        chunk_size: 8,
        d_inner: 16,
        d_state: 4,
        ..GeneConfig::default()
    };
    c.image = ViTConfig {
        patch: 4,
        heads: 2,
        mlp_hidden: 16,
        ..ViTConfig::default()
    };
    c.align = AlignConfig {
        d_feat: 8,
        ..AlignConfig::default()
    };
    c.decoder = DecoderConfig {
        d_mid: 4,
        d_up: 4,
        mlp_hidden: 16,
        ..DecoderConfig::default()
    };
    c
}

struct Inputs {
    samples: Vec<Prepared>,
}

fn random_inputs(cfg: &RunConfig, n: usize, rng: &mut ChaCha8Rng) -> Inputs {
    let (h, w) = (cfg.data.image_h, cfg.data.image_w);
    let samples = (0..n)
        .map(|i| {
            let mask =
                Tensor::uniform(&[h, w], 0.0, 1.0, rng).map(|v| if v < 0.3 { 1.0 } else { 0.0 });
            Prepared {
                sample_id: format!("r{i}"),
                genes: Tensor::randn(&[cfg.data.n_genes], 1.0, rng).into_data(),
                image: Tensor::randn(&[1, h, w], 1.0, rng),
                mask,
            }
        })
        .collect();
    Inputs { samples }
}

type LossFn<'a> = Box<dyn Fn(&mut Graph, &Bindings) -> Result<Var> + 'a>;

struct GradCase<'a> {
    name: &'static str,
    params: ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    loss: LossFn<'a>,
}

fn grad_cases<'a>(
    cfg: &'a RunConfig,
    data: &'a Inputs,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GradCase<'a>>> {
    let gcfg = cfg.gene();
    let vit = cfg.vit();
    let dcfg = cfg.decoder();
    let s0 = &data.samples[0];
    let mut cases = Vec::new();

    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let gc = GeneConfig {
            scan: mode,
            ..gcfg.clone()
        };
        let params = generic_point(&gene::init(&gc, rng)?, ENCODER_JITTER, rng)?;
        let genes = s0.genes.clone();
        cases.push(GradCase {
            name: if mode == ScanMode::Parallel {
                "gene_encoder.parallel"
            } else {
                "gene_encoder.sequential"
            },
            params,
            trainable: Box::new(|_| true),
            loss: Box::new(move |g, b| {
                let t = gene::encode_genes(g, &b.scope(gene::PREFIX), &genes, &gc)?;
                readout(g, t)
            }),
        });
    }

    let params = generic_point(&image::init(&vit, rng)?, ENCODER_JITTER, rng)?;
    let vit2 = vit.clone();
    cases.push(GradCase {
        name: "image_encoder",
        params,
        trainable: Box::new(|_| true),
        loss: Box::new(move |g, b| {
            let t = image::encode_image(g, &b.scope(image::PREFIX), &s0.image, &vit2)?;
            readout(g, t)
        }),
    });

    for variant in [LossVariant::Paper, LossVariant::Symmetric] {
        for learn_tau in [false, true] {
            let ac = AlignConfig {
                variant,
                learn_tau,
                tau: 0.5,
                ..cfg.align.clone()
            };
            let params = generic_point(&align::init(&ac, cfg.d_model, rng)?, ENCODER_JITTER, rng)?;
            let b_sz = 4;
            let ip = Tensor::randn(&[b_sz, cfg.d_model], 1.0, rng);
            let gp = Tensor::randn(&[b_sz, cfg.d_model], 1.0, rng);
            let name = match (variant, learn_tau) {
                (LossVariant::Paper, false) => "heads+loss.paper",
                (LossVariant::Paper, true) => "heads+loss.paper.learned_tau",
                (LossVariant::Symmetric, false) => "heads+loss.symmetric",
                (LossVariant::Symmetric, true) => "heads+loss.symmetric.learned_tau",
            };
            cases.push(GradCase {
                name,
                params,
                trainable: Box::new(|_| true),
                loss: Box::new(move |g, b| {
                    let a = b.scope(align::PREFIX);
                    let ip = g.constant(ip.clone());
                    let gp = g.constant(gp.clone());
                    let i = align::project_features(g, &a.child("image_proj"), ip)?;
                    let gf = align::project_features(g, &a.child("gene_proj"), gp)?;
                    let s = match a.opt_var("log_tau") {
                        Some(lt) => align::similarity_matrix_learned(g, i, gf, lt)?,
                        None => align::similarity_matrix(g, i, gf, ac.tau)?,
                    };
                    align::contrastive_loss(g, s, ac.variant)
                }),
            });
        }
    }

    let params = generic_point(&decoder::init(&dcfg, rng)?, DECODER_JITTER, rng)?;
    let t = gcfg.token_count();
    let n = vit.token_count();
    let gt = Tensor::randn(&[t, cfg.d_model], 1.0, rng);
    let it = Tensor::randn(&[n, cfg.d_model], 1.0, rng);
    let grid = vit.grid();
    let out = (cfg.data.image_h, cfg.data.image_w);
    cases.push(GradCase {
        name: "fusion_decoder+dice",
        params,
        trainable: Box::new(|_| true),
        loss: Box::new(move |g, b| {
            let gv = g.constant(gt.clone());
            let iv = g.constant(it.clone());
            let logits =
                decoder::decode_mask(g, &b.scope(decoder::PREFIX), &dcfg, gv, iv, grid, out)?;
            decoder::dice_loss(g, logits, &s0.mask)
        }),
    });

    let mut params = train::init_encoders(cfg)?;
    params.extend(train::init_decoder(cfg)?);
    let params = generic_point(&params, DECODER_JITTER, rng)?;
    cases.push(GradCase {
        name: "model.pretrain_step",
        params: params.clone(),
        trainable: Box::new(|n| !n.starts_with("decoder.")),
        loss: Box::new(move |g, b| {
            let batch: Vec<&Prepared> = data.samples.iter().collect();
            train::contrastive_loss(g, b, cfg, &batch)
        }),
    });
    cases.push(GradCase {
        name: "model.finetune_step",
        params,
        trainable: Box::new(|n| !n.starts_with("align.")),
        loss: Box::new(move |g, b| train::segmentation_loss(g, b, cfg, &[s0], false)),
    });
    Ok(cases)
}

fn run_grad_checks(
    report: &mut VerifyReport,
    label: &str,
    cfg: &RunConfig,
    seeds: &[u64],
    max_coords: Option<usize>,
) -> Result<()> {
    let mut merged: Vec<(&'static str, GradCheckReport)> = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify.grad", 0));
        let data = random_inputs(cfg, 2, &mut rng);
        let cases = grad_cases(cfg, &data, &mut rng)?;
        for (k, case) in cases.into_iter().enumerate() {
            let opts = GradCheckOptions {
                max_coords,
                seed: seed.wrapping_add(k as u64),
                ..GradCheckOptions::default()
            };
            let r = check_graph_gradients(&case.params, &case.trainable, &case.loss, &opts)?;
            match merged.iter_mut().find(|(n, _)| *n == case.name) {
                Some((_, m)) => m.merge(r),
                None => merged.push((case.name, r)),
            }
        }
    }
    for (name, r) in merged {
        let worst = r
            .worst()
            .map(|w| {
                format!(
                    "{}[{}] analytic={:.6e} numeric={:.6e}",
                    w.name, w.worst.0, w.worst.1, w.worst.2
                )
            })
            .unwrap_or_default();
        report.push(
            format!("grad.{name}[{label}]"),
            r.max_rel(),
            GRAD_TOL,
            format!(
                "tensors={} coords={} worst={worst}",
                r.tensors.len(),
                r.coords_checked()
            ),
        );
    }
    Ok(())
}

fn random_scan(rng: &mut ChaCha8Rng, max_t: usize) -> Result<ScanInputs> {
    let t = rng.random_range(1..=max_t);
    let d = rng.random_range(1..=16);
    let s = rng.random_range(1..=8);
    let delta = Tensor::uniform(&[t, d], 0.001, 0.5, rng);
    let a = Tensor::uniform(&[d, s], -4.0, -0.05, rng);
    let b = Tensor::randn(&[t, s], 1.0, rng);
    let x = Tensor::randn(&[t, d], 1.0, rng);
    let (abar, bbar) = scan::discretize_zoh(&delta, &a, &b)?;
    let mut bx = bbar.into_data();
    for (i, v) in bx.iter_mut().enumerate() {
        *v *= x.data()[i / s];
    }
    ScanInputs::new(
        abar,
        Tensor::new(vec![t, d, s], bx)?,
        Tensor::randn(&[t, s], 1.0, rng),
        Tensor::randn(&[d], 1.0, rng),
        x,
    )
}

/// Parallel/sequential agreement on 100 random scans up to `T = 512`, and
/// exact causality under a single-step perturbation.
pub fn scan_checks(report: &mut VerifyReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify.scan", 0));
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = random_scan(&mut rng, 512)?;
        let a = scan::selective_scan_sequential(&s)?;
        let b = scan::selective_scan_parallel(&s)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    report.push(
        "scan.parallel_vs_sequential",
        worst,
        SCAN_TOL,
        "instances=100 T<=512",
    );

    // Perturbing x at step k must leave outputs before k bitwise unchanged.
    let mut leaks = 0usize;
    for _ in 0..20 {
        let s = random_scan(&mut rng, 128)?;
        let (t, d, _) = s.dims()?;
        if t < 2 {
            continue;
        }
        let k = rng.random_range(1..t);
        let mut p = s.clone();
        let mut x = p.x.clone().into_data();
        x[k * d] += 1.0;
        p.x = Tensor::new(vec![t, d], x)?;
        let mut bx = p.bx.clone().into_data();
        let width = bx.len() / t;
        for v in &mut bx[k * width..(k + 1) * width] {
            *v += 0.5;
        }
        p.bx = Tensor::new(s.bx.shape().to_vec(), bx)?;
        for mode_out in [
            (
                scan::selective_scan_sequential(&s)?,
                scan::selective_scan_sequential(&p)?,
            ),
            (
                scan::selective_scan_parallel(&s)?,
                scan::selective_scan_parallel(&p)?,
            ),
        ] {
            let (a, b) = mode_out;
            leaks += a.data()[..k * d]
                .iter()
                .zip(&b.data()[..k * d])
                .filter(|(u, v)| u.to_bits() != v.to_bits())
                .count();
        }
    }
    report.push(
        "scan.causality",
        leaks as f64,
        0.0,
        "changed outputs before the perturbed step",
    );
    Ok(())
}

fn loss_checks(report: &mut VerifyReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify.loss", 0));
    let unit = |rng: &mut ChaCha8Rng, b: usize, f: usize| -> Result<Tensor> {
        let x = Tensor::randn(&[b, f], 1.0, rng);
        let rows: Vec<f64> = (0..b)
            .flat_map(|r| {
                let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                x.row(r).iter().map(move |v| v / n).collect::<Vec<_>>()
            })
            .collect();
        Tensor::matrix(b, f, rows)
    };

    let v = unit(&mut rng, 1, 32)?;
    let s = align::similarity_eager(&v, &v, 0.07)?;
    let l = align::contrastive_loss_eager(&s, LossVariant::Paper)?;
    report.push("loss.single_pair_is_zero", l.abs(), 1e-12, "");

    let s = Tensor::full(&[2, 2], 0.3 / 0.07);
    let l = align::contrastive_loss_eager(&s, LossVariant::Paper)?;
    report.push("loss.equal_cosines_log4", (l - 4f64.ln()).abs(), 1e-9, "");

    let mut perm_err: f64 = 0.0;
    let mut scale_err: f64 = 0.0;
    for _ in 0..20 {
        let b = rng.random_range(2..=16);
        let i = unit(&mut rng, b, 32)?;
        let g = unit(&mut rng, b, 32)?;
        let mut order: Vec<usize> = (0..b).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let pick = |t: &Tensor| {
            Tensor::matrix(
                b,
                32,
                order.iter().flat_map(|&r| t.row(r).to_vec()).collect(),
            )
        };
        for variant in [LossVariant::Paper, LossVariant::Symmetric] {
            let base =
                align::contrastive_loss_eager(&align::similarity_eager(&i, &g, 0.07)?, variant)?;
            let perm = align::contrastive_loss_eager(
                &align::similarity_eager(&pick(&i)?, &pick(&g)?, 0.07)?,
                variant,
            )?;
            perm_err = perm_err.max((base - perm).abs());

            let pooled = Tensor::randn(&[b, 16], 1.0, &mut rng);
            let w = Tensor::randn(&[16, 32], 0.25, &mut rng);
            let feats = |p: &Tensor| -> Result<Tensor> {
                let rows = (0..b)
                    .map(|r| align::project_features_eager(&Tensor::vector(p.row(r).to_vec())?, &w))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::matrix(b, 32, rows.iter().flat_map(|t| t.data().to_vec()).collect())
            };
            let scaled = Tensor::matrix(
                b,
                16,
                (0..b)
                    .flat_map(|r| {
                        let a = 0.1 + r as f64 * 1.7;
                        pooled.row(r).iter().map(move |v| v * a).collect::<Vec<_>>()
                    })
                    .collect(),
            )?;
            let l1 = align::contrastive_loss_eager(
                &align::similarity_eager(&feats(&pooled)?, &g, 0.07)?,
                variant,
            )?;
            let l2 = align::contrastive_loss_eager(
                &align::similarity_eager(&feats(&scaled)?, &g, 0.07)?,
                variant,
            )?;
            scale_err = scale_err.max((l1 - l2).abs() / l1.abs().max(1.0));
        }
    }
    report.push(
        "loss.batch_permutation_invariance",
        perm_err,
        1e-12,
        "both variants",
    );
    report.push(
        "loss.rescaling_invariance",
        scale_err,
        1e-12,
        "both variants",
    );

    // Symmetric loss: the corner S = ±1/τ beats every single-entry step inward.
    let (b, tau) = (4, 0.5);
    let corner = |i: usize, j: usize| if i == j { 1.0 / tau } else { -1.0 / tau };
    let base = Tensor::matrix(b, b, (0..b * b).map(|k| corner(k / b, k % b)).collect())?;
    let l0 = align::contrastive_loss_eager(&base, LossVariant::Symmetric)?;
    let mut worst_gain = f64::NEG_INFINITY;
    for k in 0..b * b {
        let mut d = base.clone().into_data();
        d[k] -= corner(k / b, k % b).signum() * 0.1;
        let l = align::contrastive_loss_eager(&Tensor::matrix(b, b, d)?, LossVariant::Symmetric)?;
        worst_gain = worst_gain.max(l0 - l);
    }
    report.push(
        "loss.symmetric_corner_minimum",
        worst_gain.max(0.0),
        0.0,
        "largest decrease from an inward step",
    );

    let mut worst: f64 = 0.0;
    for variant in [LossVariant::Paper, LossVariant::Symmetric] {
        let s = Tensor::uniform(&[5, 5], -2.0, 2.0, &mut rng);
        let mut params = ParamStore::new();
        params.insert("s", s);
        let r = check_graph_gradients(
            &params,
            |_| true,
            |g, b| align::contrastive_loss(g, b.var("s")?, variant),
            &GradCheckOptions::default(),
        )?;
        worst = worst.max(r.max_rel());
    }
    report.push("loss.gradient_wrt_similarity", worst, 1e-6, "both variants");
    Ok(())
}

fn format_checks(report: &mut VerifyReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify.format", 0));
    let mut mismatches = 0usize;
    for rank in 0..=4 {
        for _ in 0..5 {
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5)).collect();
            let t = Tensor::randn(&shape, 1e3, &mut rng);
            let back = mgit::decode(&mgit::encode(&t))?;
            mismatches += usize::from(!back.bitwise_eq(&t));
        }
    }
    report.push(
        "format.roundtrip_bitwise",
        mismatches as f64,
        0.0,
        "ranks 0..=4",
    );

    let b = mgit::encode(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0])?);
    let mut header = vec![
        0x4D, 0x47, 0x49, 0x54, 1, 0, 0, 0, 1, 2, 2, 0, 0, 0, 0, 0, 0, 0, 2,
    ];
    header.extend_from_slice(&[0; 7]);
    let ok = b.len() == 58 && b[..26] == header[..];
    report.push("format.header_2x2", if ok { 0.0 } else { 1.0 }, 0.0, "");

    let mut kinds = std::collections::HashSet::new();
    let mut bad = b.clone();
    bad[..4].copy_from_slice(b"XXXX");
    let mut ver = b.clone();
    ver[4] = 9;
    let mut dt = b.clone();
    dt[8] = 7;
    for bytes in [&bad[..], &ver[..], &dt[..], &b[..b.len() - 3]] {
        if let Err(e) = mgit::decode(bytes) {
            kinds.insert(std::mem::discriminant(&match e {
                crate::Error::Format(f) => f,
                _ => continue,
            }));
        }
    }
    report.push(
        "format.distinct_errors",
        (4 - kinds.len()) as f64,
        0.0,
        "bad magic / version / dtype / truncated",
    );
    Ok(())
}

/// A scaled matmul backward rule must be caught by the same checker.
fn negative_control(report: &mut VerifyReport, seed: u64) -> Result<()> {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify.fault", 0));
    let params = generic_point(
        &image::init(&cfg.vit(), &mut rng)?,
        ENCODER_JITTER,
        &mut rng,
    )?;
    let img = Tensor::randn(&[1, cfg.data.image_h, cfg.data.image_w], 1.0, &mut rng);
    let vit = cfg.vit();
    let r = check_graph_gradients_with(
        &params,
        |_| true,
        |g, b| {
            let t = image::encode_image(g, &b.scope(image::PREFIX), &img, &vit)?;
            readout(g, t)
        },
        &GradCheckOptions::default(),
        |g| g.set_fault(Some(BackwardFault::MatMulLhs)),
    )?;
    let detected = r.max_rel() > GRAD_TOL;
    report.checks.push(Check {
        name: "negative_control.corrupted_matmul_backward".into(),
        max_error: r.max_rel(),
        tolerance: GRAD_TOL,
        passed: detected,
        detail: "must exceed tolerance".into(),
    });
    Ok(())
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seeds: Vec<u64>,
    /// Coordinates per tensor for the full-width checks; `None` checks all.
    pub max_coords: Option<usize>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            max_coords: Some(16),
        }
    }
}

/// Runs every check. Gradient checks run for each seed on the configured
/// architecture (sampled coordinates) and on [`small_config`] (every
/// coordinate).
pub fn verify(cfg: &RunConfig, opts: &VerifyOptions) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut report = VerifyReport::default();
    let seeds: Vec<u64> = opts
        .seeds
        .iter()
        .map(|s| s.wrapping_add(cfg.seed))
        .collect();
    run_grad_checks(
        &mut report,
        "small,all-coords",
        &small_config(),
        &seeds,
        None,
    )?;
    run_grad_checks(&mut report, "configured", cfg, &seeds, opts.max_coords)?;
    scan_checks(&mut report, cfg.seed)?;
    loss_checks(&mut report, cfg.seed)?;
    format_checks(&mut report, cfg.seed)?;
    negative_control(&mut report, cfg.seed)?;
    Ok(report)
}

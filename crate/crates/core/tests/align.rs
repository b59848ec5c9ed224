use mgi::align::{self, AlignConfig, LossVariant};
use mgi::gradcheck::{check_graph_gradients, finite_diff_check, GradCheckOptions};
use mgi::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VARIANTS: [LossVariant; 2] = [LossVariant::Paper, LossVariant::Symmetric];

fn unit_rows(b: usize, f: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(&[b, f], 1.0, rng);
    for r in 0..b {
        let row = &mut t.data_mut()[r * f..(r + 1) * f];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Straight-line formulas, written independently of the tape.
fn oracle_loss(s: &Tensor, variant: LossVariant) -> f64 {
    let (b, _) = s.dims2().unwrap();
    let lse = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    match variant {
        LossVariant::Paper => {
            let z = lse(&mut s.data().iter().copied());
            -(0..b).map(|i| s.get2(i, i) - z).sum::<f64>() / b as f64
        }
        LossVariant::Symmetric => {
            let mut total = 0.0;
            for i in 0..b {
                total += lse(&mut (0..b).map(|j| s.get2(i, j))) - s.get2(i, i);
                total += lse(&mut (0..b).map(|j| s.get2(j, i))) - s.get2(i, i);
            }
            total / (2.0 * b as f64)
        }
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let (_, f) = t.dims2().unwrap();
    let data = perm.iter().flat_map(|&p| t.row(p).to_vec()).collect();
    Tensor::matrix(perm.len(), f, data).unwrap()
}

#[test]
fn mixed_pool_examples() {
    let v = [0.5, -1.0, 2.0];
    let equal = Tensor::matrix(4, 3, v.repeat(4)).unwrap();
    assert_eq!(align::mixed_pool_eager(&equal).unwrap().data(), &v);

    let v = [1.0, 0.0, 4.0];
    let two = Tensor::matrix(2, 3, [[0.0; 3], v].concat()).unwrap();
    assert_eq!(
        align::mixed_pool_eager(&two).unwrap().data(),
        &[0.75, 0.0, 3.0]
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = Tensor::randn(&[7, 5], 1.0, &mut rng);
    let pooled = align::mixed_pool_eager(&t).unwrap();
    let perm = permute_rows(&t, &[3, 6, 0, 1, 5, 2, 4]);
    assert!(
        align::mixed_pool_eager(&perm)
            .unwrap()
            .max_abs_diff(&pooled)
            < 1e-15
    );

    let mut g = Graph::new();
    let x = g.constant(t);
    let y = align::mixed_pool(&mut g, x).unwrap();
    assert!(g.value(y).max_abs_diff(&pooled) < 1e-15);

    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
}

#[test]
fn projection_is_unit_and_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let x = Tensor::randn(&[6], 1.0, &mut rng);
    let f = align::project_features_eager(&x, &w).unwrap();
    assert!((f.l2_norm() - 1.0).abs() < 1e-9);
    let scaled = align::project_features_eager(&x.map(|v| 3.7 * v), &w).unwrap();
    assert!(scaled.max_abs_diff(&f) < 1e-15);

    // Independent oracle: z / sqrt(z·z).
    let z: Vec<f64> = (0..4)
        .map(|j| (0..6).map(|i| x.data()[i] * w.get2(i, j)).sum())
        .collect();
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (a, b) in f.data().iter().zip(&z) {
        assert!((a - b / n).abs() < 1e-12);
    }

    // Tape version on a batch of rows.
    let mut store = ParamStore::new();
    store.insert("align.image_proj.w", w.clone());
    let rows = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let out = store
        .evaluate(|g, b| {
            let r = g.constant(rows.clone());
            align::project_features(g, &b.scope("align.image_proj"), r)
        })
        .unwrap();
    for r in 0..3 {
        let want =
            align::project_features_eager(&Tensor::vector(rows.row(r).to_vec()).unwrap(), &w)
                .unwrap();
        assert!(
            Tensor::vector(out.row(r).to_vec())
                .unwrap()
                .max_abs_diff(&want)
                < 1e-12
        );
    }
}

#[test]
fn projection_rejects_zero_vector() {
    let w = Tensor::ones(&[3, 2]);
    assert!(align::project_features_eager(&Tensor::zeros(&[3]), &w).is_err());
    let mut store = ParamStore::new();
    store.insert("h.w", w);
    let err = store.evaluate(|g, b| {
        let r = g.constant(Tensor::zeros(&[1, 3]));
        align::project_features(g, &b.scope("h"), r)
    });
    assert!(err.is_err());
}

#[test]
fn similarity_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let i = unit_rows(5, 8, &mut rng);
    let s = align::similarity_eager(&i, &i, 1.0).unwrap();
    for k in 0..5 {
        assert!((s.get2(k, k) - 1.0).abs() < 1e-12);
    }

    let a = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let b = Tensor::matrix(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(align::similarity_eager(&a, &b, 0.07)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    let g = unit_rows(4, 8, &mut rng);
    let i = unit_rows(4, 8, &mut rng);
    let tau = 0.07;
    let s = align::similarity_eager(&i, &g, tau).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let dot: f64 = i.row(r).iter().zip(g.row(c)).map(|(x, y)| x * y).sum();
            assert!((s.get2(r, c) - dot / tau).abs() < 1e-12);
            assert!((s.get2(r, c) * tau).abs() <= 1.0 + 1e-9);
        }
    }

    let mut gr = Graph::new();
    let (iv, gv) = (gr.constant(i.clone()), gr.constant(g.clone()));
    let sv = align::similarity_matrix(&mut gr, iv, gv, tau).unwrap();
    assert!(gr.value(sv).max_abs_diff(&s) < 1e-12);

    assert!(align::similarity_eager(&i, &g, 0.0).is_err());
    assert!(align::similarity_eager(&i, &g, -1.0).is_err());
    assert!(align::similarity_matrix(&mut gr, iv, gv, 0.0).is_err());
    assert!(AlignConfig {
        tau: 0.0,
        ..AlignConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn single_pair_paper_loss_is_zero() {
    for tau in [0.07, 1.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let i = unit_rows(1, 16, &mut rng);
        let s = align::similarity_eager(&i, &i, tau).unwrap();
        let l = align::contrastive_loss_eager(&s, LossVariant::Paper).unwrap();
        assert!(l.abs() <= 1e-12, "{l}");
    }
}

#[test]
fn equal_cosines_give_log_four() {
    let s = Tensor::full(&[2, 2], 0.3 / 0.07);
    let l = align::contrastive_loss_eager(&s, LossVariant::Paper).unwrap();
    assert!((l - 4f64.ln()).abs() <= 1e-9);
}

#[test]
fn uniform_similarities_give_log_b_squared() {
    let s = Tensor::full(&[16, 16], 0.0);
    let l = align::contrastive_loss_eager(&s, LossVariant::Paper).unwrap();
    assert!((l - 256f64.ln()).abs() < 1e-12);
    assert!((l - 5.545).abs() < 1e-3);
}

#[test]
fn losses_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for b in [1, 2, 5, 16] {
        let s = Tensor::uniform(&[b, b], -1.0 / 0.07, 1.0 / 0.07, &mut rng);
        for v in VARIANTS {
            let got = align::contrastive_loss_eager(&s, v).unwrap();
            assert!((got - oracle_loss(&s, v)).abs() < 1e-10, "{v} B={b}");
        }
    }
    assert!(align::contrastive_loss_eager(&Tensor::zeros(&[2, 3]), LossVariant::Paper).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_permutation_invariance(seed in 0u64..10_000, b in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = unit_rows(b, 8, &mut rng);
        let g = unit_rows(b, 8, &mut rng);
        let mut perm: Vec<usize> = (0..b).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let s = align::similarity_eager(&i, &g, 0.07).unwrap();
        let sp = align::similarity_eager(&permute_rows(&i, &perm), &permute_rows(&g, &perm), 0.07).unwrap();
        for v in VARIANTS {
            let a = align::contrastive_loss_eager(&s, v).unwrap();
            let c = align::contrastive_loss_eager(&sp, v).unwrap();
            prop_assert!((a - c).abs() <= 1e-12, "{} {} vs {}", v, a, c);
        }
    }

    #[test]
    fn positive_rescaling_leaves_loss_unchanged(seed in 0u64..10_000, alpha in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let pooled = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let gene = unit_rows(3, 4, &mut rng);
        let feats = |scale: f64, row: usize| {
            let x = Tensor::vector(pooled.row(row).iter().map(|v| v * if row == 1 { scale } else { 1.0 }).collect()).unwrap();
            align::project_features_eager(&x, &w).unwrap().into_data()
        };
        let build = |scale: f64| Tensor::matrix(3, 4, (0..3).flat_map(|r| feats(scale, r)).collect()).unwrap();
        let s1 = align::similarity_eager(&build(1.0), &gene, 0.07).unwrap();
        let s2 = align::similarity_eager(&build(alpha), &gene, 0.07).unwrap();
        prop_assert!(s1.max_abs_diff(&s2) < 1e-12);
        for v in VARIANTS {
            let a = align::contrastive_loss_eager(&s1, v).unwrap();
            let b = align::contrastive_loss_eager(&s2, v).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_loss_is_minimized_at_the_corner(
        seed in 0u64..10_000,
        b in 2usize..8,
        delta in 1e-3f64..2.0,
        tau in 0.25f64..2.0,
    ) {
        // At τ = 0.07 the corner loss is ~1e-12 and perturbations vanish
        // below one ulp, so the ordering is checked at resolvable scales.
        let hi = 1.0 / tau;
        let mut best = Tensor::full(&[b, b], -hi);
        for i in 0..b {
            best.data_mut()[i * b + i] = hi;
        }
        let l0 = align::contrastive_loss_eager(&best, LossVariant::Symmetric).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rand::Rng::random_range(&mut rng, 0..b * b);
        let mut moved = best.clone();
        // Moving any entry inward keeps S in the box and must not help.
        let d = &mut moved.data_mut()[idx];
        *d = if *d > 0.0 { *d - delta.min(hi) } else { *d + delta.min(hi) };
        let l1 = align::contrastive_loss_eager(&moved, LossVariant::Symmetric).unwrap();
        prop_assert!(l1 > l0, "{} <= {}", l1, l0);
    }
}

#[test]
fn loss_gradients_in_similarities_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        // Moderate logits keep every softmax weight well above the
        // central-difference noise floor; the peaked regime is covered by the
        // closed-form test below.
        p.insert("s", Tensor::uniform(&[5, 5], -2.0, 2.0, &mut rng));
        for v in VARIANTS {
            let report = check_graph_gradients(
                &p,
                |_| true,
                |g, b| {
                    let s = b.var("s")?;
                    align::contrastive_loss(g, s, v)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(
                report.max_rel() < 1e-6,
                "{v} seed {seed}:\n{report}{:?}",
                report.worst()
            );
        }
    }
}

#[test]
fn loss_gradients_match_closed_form_at_default_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = 6;
    let s = Tensor::uniform(&[b, b], -1.0 / 0.07, 1.0 / 0.07, &mut rng);
    let softmax_all = mgi::ops::softmax(&s.clone().reshape(&[b * b]).unwrap(), 0).unwrap();
    let rows = mgi::ops::softmax(&s, 1).unwrap();
    let cols = mgi::ops::softmax(&s, 0).unwrap();
    for v in VARIANTS {
        let mut g = Graph::new();
        let sv = g.leaf(s.clone(), true);
        let l = align::contrastive_loss(&mut g, sv, v).unwrap();
        let grad = g.backward(l).unwrap();
        let grad = grad.get(sv).unwrap();
        for i in 0..b {
            for j in 0..b {
                let target = if i == j { 1.0 / b as f64 } else { 0.0 };
                let want = match v {
                    LossVariant::Paper => softmax_all.data()[i * b + j] - target,
                    LossVariant::Symmetric => {
                        0.5 * (rows.get2(i, j) + cols.get2(i, j)) / b as f64 - target
                    }
                };
                assert!((grad.get2(i, j) - want).abs() < 1e-12, "{v} ({i},{j})");
            }
        }
    }
}

#[test]
fn head_and_temperature_gradients_match_finite_differences() {
    let cfg = AlignConfig {
        d_feat: 4,
        learn_tau: true,
        ..AlignConfig::default()
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = align::init(&cfg, 6, &mut rng).unwrap();
        p.insert("img_tokens", Tensor::randn(&[3 * 5, 6], 1.0, &mut rng));
        p.insert("gene_tokens", Tensor::randn(&[3 * 7, 6], 1.0, &mut rng));
        for v in VARIANTS {
            let report = check_graph_gradients(
                &p,
                |_| true,
                |g, b| {
                    let mut pooled = |name: &str, t: usize| -> mgi::Result<mgi::Var> {
                        let all = b.var(name)?;
                        let mut rows = Vec::new();
                        for k in 0..3 {
                            // Tokens of sample k live in rows k·t .. (k+1)·t.
                            let tr = g.transpose(all)?;
                            let cols = g.slice_cols(tr, k * t, (k + 1) * t)?;
                            let tok = g.transpose(cols)?;
                            rows.push(align::mixed_pool(g, tok)?);
                        }
                        g.stack(&rows)
                    };
                    let pi = pooled("img_tokens", 5)?;
                    let pg = pooled("gene_tokens", 7)?;
                    let fi = align::project_features(g, &b.scope("align.image_proj"), pi)?;
                    let fg = align::project_features(g, &b.scope("align.gene_proj"), pg)?;
                    let s = align::similarity_matrix_learned(g, fi, fg, b.var("align.log_tau")?)?;
                    align::contrastive_loss(g, s, v)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel() < 1e-4, "{v} seed {seed}:\n{report}");
        }
    }
}

#[test]
fn fixed_and_learned_temperatures_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let i = unit_rows(4, 8, &mut rng);
    let gf = unit_rows(4, 8, &mut rng);
    let mut g = Graph::new();
    let (iv, gv) = (g.constant(i), g.constant(gf));
    let lt = g.constant(Tensor::vector(vec![0.07f64.ln()]).unwrap());
    let a = align::similarity_matrix(&mut g, iv, gv, 0.07).unwrap();
    let b = align::similarity_matrix_learned(&mut g, iv, gv, lt).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
}

#[test]
fn finite_difference_oracle_catches_a_wrong_loss_gradient() {
    let mut p = ParamStore::new();
    p.insert("s", Tensor::full(&[2, 2], 1.0));
    let mut wrong = ParamStore::new();
    wrong.insert("s", Tensor::full(&[2, 2], 0.0));
    let f = |p: &ParamStore| align::contrastive_loss_eager(p.require("s")?, LossVariant::Paper);
    let report = finite_diff_check(f, &p, &wrong, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel() > 0.5);
}

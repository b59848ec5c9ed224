use mgi::gradcheck::{check_graph_gradients, GradCheckOptions};
use mgi::image::{self, ViTConfig};
use mgi::ops::{self, Activation};
use mgi::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(depth: usize) -> ViTConfig {
    ViTConfig {
        image_h: 8,
        image_w: 8,
        patch: 4,
        d_model: 8,
        heads: 2,
        mlp_hidden: 12,
        depth,
        init_std: 0.02,
    }
}

fn encode(p: &ParamStore, img: &Tensor, cfg: &ViTConfig) -> Tensor {
    p.evaluate(|g, b| image::encode_image(g, &b.scope(image::PREFIX), img, cfg))
        .unwrap()
}

fn noisy(p: ParamStore, std: f64, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in p.iter() {
        let n = Tensor::randn(t.shape(), std, rng);
        let data = t.data().iter().zip(n.data()).map(|(a, b)| a + b).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    out
}

fn image(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(&[1, cfg.image_h, cfg.image_w], 0.0, 1.0, rng)
}

/// Per-head loop over explicit dot products.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (n, d) = q.dims2().unwrap();
    let m = k.dims2().unwrap().0;
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    cols.clone()
                        .map(|c| q.get2(i, c) * k.get2(j, c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for c in cols.clone() {
                out[i * d + c] = (0..m)
                    .map(|j| (scores[j] - mx).exp() / z * v.get2(j, c))
                    .sum();
            }
        }
    }
    Tensor::matrix(n, d, out).unwrap()
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = ops::matmul(x, w).unwrap();
    let d = b.numel();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % d];
    }
    y
}

fn mhsa_eval(p: &ParamStore, tokens: &Tensor, heads: usize) -> Tensor {
    p.evaluate(|g, b| {
        let t = g.constant(tokens.clone());
        image::mhsa(g, &b.scope("image.block0.attn"), t, heads)
    })
    .unwrap()
}

#[test]
fn default_grid_has_64_tokens() {
    let cfg = ViTConfig::default();
    assert_eq!(cfg.grid(), (8, 8));
    assert_eq!(cfg.token_count(), 64);
    let p = image::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(p.get("image.pos").unwrap().shape(), &[64, 32]);
    assert!(p.get("image.pos").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn grid_invariants_hold_across_configs() {
    for (h, w, patch) in [(8, 8, 2), (12, 8, 4), (64, 64, 8), (6, 9, 3)] {
        let cfg = ViTConfig {
            image_h: h,
            image_w: w,
            patch,
            ..tiny(1)
        };
        assert_eq!(cfg.token_count(), h * w / (patch * patch));
        let img = Tensor::zeros(&[1, h, w]);
        assert_eq!(
            image::patches(&img, &cfg).unwrap().shape(),
            &[cfg.token_count(), patch * patch]
        );
    }
    let bad = ViTConfig {
        image_h: 10,
        ..tiny(1)
    };
    assert!(bad.validate().is_err());
    assert!(image::patches(&Tensor::zeros(&[1, 10, 8]), &bad).is_err());
}

#[test]
fn constant_image_gives_identical_tokens() {
    let cfg = ViTConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = image::init(&cfg, &mut rng).unwrap();
    let img = Tensor::full(&[1, 64, 64], 0.3);
    let t = image::patchify_eager(
        &img,
        &cfg,
        p.get("image.patch.w").unwrap(),
        p.get("image.patch.b").unwrap(),
        p.get("image.pos").unwrap(),
    )
    .unwrap();
    for r in 1..cfg.token_count() {
        assert_eq!(t.row(r), t.row(0));
    }
}

#[test]
fn patchify_matches_reshape_oracle() {
    let cfg = ViTConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = image(&cfg, &mut rng);
    let proj = Tensor::randn(&[64, 32], 1.0, &mut rng);
    let bias = Tensor::randn(&[32], 1.0, &mut rng);
    let pos = Tensor::randn(&[64, 32], 1.0, &mut rng);
    let got = image::patchify_eager(&img, &cfg, &proj, &bias, &pos).unwrap();
    for gr in 0..8 {
        for gc in 0..8 {
            let n = gr * 8 + gc;
            for j in 0..32 {
                let mut want = bias.data()[j] + pos.get2(n, j);
                for py in 0..8 {
                    for px in 0..8 {
                        let pix = img.data()[(gr * 8 + py) * 64 + gc * 8 + px];
                        want += pix * proj.get2(py * 8 + px, j);
                    }
                }
                assert!((got.get2(n, j) - want).abs() < 1e-12);
            }
        }
    }
    // The tape version agrees with the eager one.
    let mut store = ParamStore::new();
    store.insert("image.patch.w", proj);
    store.insert("image.patch.b", bias);
    store.insert("image.pos", pos);
    let tape = store
        .evaluate(|g, b| image::patchify(g, &b.scope(image::PREFIX), &img, &cfg))
        .unwrap();
    assert!(tape.max_abs_diff(&got) < 1e-12);
}

#[test]
fn mhsa_matches_naive_oracle() {
    let cfg = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = noisy(image::init(&cfg, &mut rng).unwrap(), 0.5, &mut rng);
    let tokens = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let w = |n: &str| p.get(&format!("image.block0.attn.{n}.w")).unwrap();
    let b = |n: &str| p.get(&format!("image.block0.attn.{n}.b")).unwrap();
    let q = linear(&tokens, w("q"), b("q"));
    let k = ops::matmul(&tokens, w("k")).unwrap();
    let v = linear(&tokens, w("v"), b("v"));
    let want = linear(&naive_attention(&q, &k, &v, 2), w("o"), b("o"));
    assert!(mhsa_eval(&p, &tokens, 2).max_abs_diff(&want) < 1e-12);
}

#[test]
fn single_token_attention_is_value_path() {
    let cfg = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = noisy(image::init(&cfg, &mut rng).unwrap(), 0.5, &mut rng);
    let tok = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let w = |n: &str| p.get(&format!("image.block0.attn.{n}.w")).unwrap();
    let b = |n: &str| p.get(&format!("image.block0.attn.{n}.b")).unwrap();
    let want = linear(&linear(&tok, w("v"), b("v")), w("o"), b("o"));
    assert!(mhsa_eval(&p, &tok, 2).max_abs_diff(&want) < 1e-12);
}

#[test]
fn identical_tokens_give_identical_outputs() {
    let cfg = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = noisy(image::init(&cfg, &mut rng).unwrap(), 0.5, &mut rng);
    let row = Tensor::randn(&[8], 1.0, &mut rng);
    let tokens = Tensor::matrix(6, 8, row.data().repeat(6)).unwrap();
    let out = mhsa_eval(&p, &tokens, 2);
    for r in 1..6 {
        assert_eq!(out.row(r), out.row(0));
    }
}

#[test]
fn zero_output_projections_make_block_identity() {
    for n in [4, 64] {
        let cfg = ViTConfig {
            image_h: 2 * n,
            image_w: 2,
            patch: 2,
            ..tiny(1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut p = noisy(image::init(&cfg, &mut rng).unwrap(), 0.5, &mut rng);
        let tokens = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let run = |p: &ParamStore| {
            p.evaluate(|g, b| {
                let t = g.constant(tokens.clone());
                image::vit_block(g, &b.scope("image.block0"), t, &cfg)
            })
            .unwrap()
        };
        let moved = run(&p);
        assert_eq!(moved.shape(), &[n, 8]);
        assert!(!moved.bitwise_eq(&tokens));
        for name in ["attn.o.w", "attn.o.b", "mlp.fc2.w", "mlp.fc2.b"] {
            let t = p.get_mut(&format!("image.block0.{name}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        assert!(run(&p).bitwise_eq(&tokens));
    }
}

#[test]
fn vit_block_matches_reference_composition() {
    let cfg = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = noisy(image::init(&cfg, &mut rng).unwrap(), 0.5, &mut rng);
    let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let g = |n: &str| p.get(&format!("image.block0.{n}")).unwrap();
    let ln = |x: &Tensor, n: &str| {
        ops::layer_norm(
            x,
            g(&format!("{n}.gamma")),
            g(&format!("{n}.beta")),
            ops::DEFAULT_LN_EPS,
        )
        .unwrap()
    };
    let h = ln(&x, "ln1");
    let q = linear(&h, g("attn.q.w"), g("attn.q.b"));
    let k = ops::matmul(&h, g("attn.k.w")).unwrap();
    let v = linear(&h, g("attn.v.w"), g("attn.v.b"));
    let a = linear(
        &naive_attention(&q, &k, &v, 2),
        g("attn.o.w"),
        g("attn.o.b"),
    );
    let x1 = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(a.data()).map(|(a, b)| a + b).collect(),
    )
    .unwrap();
    let h = ln(&x1, "ln2");
    let m = ops::activation(
        &linear(&h, g("mlp.fc1.w"), g("mlp.fc1.b")),
        Activation::Gelu,
    )
    .unwrap();
    let m = linear(&m, g("mlp.fc2.w"), g("mlp.fc2.b"));
    let want = Tensor::new(
        x.shape().to_vec(),
        x1.data().iter().zip(m.data()).map(|(a, b)| a + b).collect(),
    )
    .unwrap();
    let got = p
        .evaluate(|gr, b| {
            let t = gr.constant(x.clone());
            image::vit_block(gr, &b.scope("image.block0"), t, &cfg)
        })
        .unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn empty_stack_is_normalized_embeddings() {
    let cfg = tiny(0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = noisy(image::init(&cfg, &mut rng).unwrap(), 0.5, &mut rng);
    let img = image(&cfg, &mut rng);
    let emb = image::patchify_eager(
        &img,
        &cfg,
        p.get("image.patch.w").unwrap(),
        p.get("image.patch.b").unwrap(),
        p.get("image.pos").unwrap(),
    )
    .unwrap();
    let want = ops::layer_norm(
        &emb,
        p.get("image.final_norm.gamma").unwrap(),
        p.get("image.final_norm.beta").unwrap(),
        ops::DEFAULT_LN_EPS,
    )
    .unwrap();
    assert!(encode(&p, &img, &cfg).max_abs_diff(&want) < 1e-12);
}

#[test]
fn encoder_is_deterministic_and_translation_sensitive() {
    let cfg = ViTConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = noisy(image::init(&cfg, &mut rng).unwrap(), 0.05, &mut rng);
    let img = image(&cfg, &mut rng);
    let a = encode(&p, &img, &cfg);
    assert!(a.bitwise_eq(&encode(&p, &img, &cfg)));

    let mut shifted = Tensor::zeros(img.shape());
    for r in 0..64 {
        for c in 1..64 {
            shifted.data_mut()[r * 64 + c] = img.data()[r * 64 + c - 1];
        }
    }
    assert!(a.max_abs_diff(&encode(&p, &shifted, &cfg)) > 1e-6);
}

#[test]
fn permuting_patches_permutes_outputs_without_positions() {
    let cfg = ViTConfig {
        image_h: 16,
        image_w: 16,
        patch: 4,
        ..tiny(2)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = noisy(image::init(&cfg, &mut rng).unwrap(), 0.3, &mut rng);
    *p.get_mut("image.pos").unwrap() = Tensor::zeros(&[16, 8]);
    let img = image(&cfg, &mut rng);
    // Swap patch (0,0) with patch (2,3).
    let (a, b) = (0usize, 2 * 4 + 3);
    let mut swapped = img.clone();
    for y in 0..4 {
        for x in 0..4 {
            let ia = y * 16 + x;
            let ib = (8 + y) * 16 + 12 + x;
            swapped.data_mut()[ia] = img.data()[ib];
            swapped.data_mut()[ib] = img.data()[ia];
        }
    }
    let out = encode(&p, &img, &cfg);
    let perm = encode(&p, &swapped, &cfg);
    for r in 0..16 {
        let src = if r == a {
            b
        } else if r == b {
            a
        } else {
            r
        };
        for (x, y) in perm.row(r).iter().zip(out.row(src)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = tiny(2);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = noisy(image::init(&cfg, &mut rng).unwrap(), 0.3, &mut rng);
        let img = image(&cfg, &mut rng);
        let w = Tensor::randn(&[cfg.token_count(), cfg.d_model], 1.0, &mut rng);
        let report = check_graph_gradients(
            &p,
            |_| true,
            |g: &mut Graph, b| {
                let y = image::encode_image(g, &b.scope(image::PREFIX), &img, &cfg)?;
                let w = g.constant(w.clone());
                let y = g.mul(y, w)?;
                g.sum(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(
            report.max_rel() < 1e-4,
            "seed {seed}:\n{report}{:?}",
            report.worst()
        );
    }
}

use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{grad_check_params, Optimizer, Trainable};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_cfg() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        severance: SeveranceSpec::none(2),
        prompt: PromptMode::Off,
        frozen: false,
        ..EncoderConfig::default()
    }
}

fn param_tensor(store: &ParamStore, id: ParamId) -> Tensor {
    store.get(id).clone()
}

/// Plain-tensor multi-head attention used as an independent oracle.
fn reference_attention(store: &ParamStore, attn: &Attention, x: &Tensor, alpha: f64) -> Tensor {
    let lin = |l: &Linear, x: &Tensor| {
        let mut y = x.matmul(&param_tensor(store, l.w)).unwrap();
        let b = param_tensor(store, l.b.unwrap());
        let c = y.shape()[1];
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[k % c];
        }
        y
    };
    let (q, k, v) = (lin(&attn.q, x), lin(&attn.k, x), lin(&attn.v, x));
    let t = x.shape()[0];
    let dh = attn.dim / attn.heads;
    let mut cat = vec![0.0; t * attn.dim];
    for h in 0..attn.heads {
        for i in 0..t {
            let mut scores: Vec<f64> = (0..t)
                .map(|j| {
                    (0..dh)
                        .map(|c| q.at2(i, h * dh + c) * k.at2(j, h * dh + c))
                        .sum::<f64>()
                        / libm::sqrt(dh as f64)
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| libm::exp(s - mx)).sum();
            for (j, s) in scores.iter_mut().enumerate() {
                *s = (1.0 - alpha) * libm::exp(*s - mx) / z + if i == j { alpha } else { 0.0 };
            }
            for c in 0..dh {
                cat[i * attn.dim + h * dh + c] =
                    (0..t).map(|j| scores[j] * v.at2(j, h * dh + c)).sum();
            }
        }
    }
    lin(&attn.o, &Tensor::new([t, attn.dim], cat).unwrap())
}

fn run_attention(store: &ParamStore, attn: &Attention, x: &Tensor, mixing: Mixing) -> Tensor {
    let mut g = Graph::inference(store);
    let xv = g.constant(x.clone());
    let y = attn.forward(&mut g, xv, xv, mixing).unwrap();
    g.value(y).clone()
}

#[test]
fn patch_embed_token_count_and_positional_identity() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng(1)).unwrap();
    *store.get_mut(enc.patch.w) = Tensor::zeros([192, 32]);
    let mut g = Graph::inference(&store);
    let t = enc
        .patch_embed(&mut g, &Tensor::zeros([3, 64, 64]))
        .unwrap();
    assert_eq!(g.value(t).shape(), &[64, 32]);
    assert_eq!(g.value(t), store.get(enc.pos));
}

#[test]
fn patch_embed_matches_per_patch_dot_products() {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig::default();
    let enc = Encoder::new(cfg.clone(), &mut store, &mut rng(2)).unwrap();
    let image = Tensor::uniform([3, 64, 64], 0.0, 1.0, &mut rng(3));
    let mut g = Graph::inference(&store);
    let t = enc.patch_embed(&mut g, &image).unwrap();
    let got = g.value(t);
    let (w, b, pos) = (
        store.get(enc.patch.w),
        store.get(enc.patch.b.unwrap()),
        store.get(enc.pos),
    );
    let mut worst = 0.0f64;
    for py in 0..8 {
        for px in 0..8 {
            let tok = py * 8 + px;
            for d in 0..32 {
                let mut acc = b.data()[d] + pos.at2(tok, d);
                for c in 0..3 {
                    for dy in 0..8 {
                        for dx in 0..8 {
                            let pix = (image.data()[(c * 64 + py * 8 + dy) * 64 + px * 8 + dx]
                                - PIXEL_MEAN)
                                / PIXEL_STD;
                            acc += pix * w.at2((c * 8 + dy) * 8 + dx, d);
                        }
                    }
                }
                worst = worst.max((acc - got.at2(tok, d)).abs());
            }
        }
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn patch_embed_rejects_wrong_size() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng(1)).unwrap();
    let mut g = Graph::inference(&store);
    assert!(matches!(
        enc.patch_embed(&mut g, &Tensor::zeros([3, 32, 32])),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn prompt_modes() {
    let mut store = ParamStore::new();
    let mut r = rng(4);
    let tokens = Tensor::randn([64, 32], 1.0, &mut r);
    let pre = store.add("pre", Tensor::randn([4, 32], 1.0, &mut r));
    let add = store.add("add", tokens.map(|v| -v));
    let short = store.add("short", Tensor::zeros([10, 32]));
    let mut g = Graph::inference(&store);
    let t = g.constant(tokens.clone());

    let off = apply_prompts(&mut g, t, PromptMode::Off, None).unwrap();
    assert_eq!(g.value(off), &tokens);

    let p = apply_prompts(&mut g, t, PromptMode::Prepend(4), Some(pre)).unwrap();
    assert_eq!(g.value(p).shape(), &[68, 32]);
    assert_eq!(&g.value(p).data()[..128], store.get(pre).data());

    let a = apply_prompts(&mut g, t, PromptMode::Add, Some(add)).unwrap();
    assert!(g.value(a).data().iter().all(|&v| v == 0.0));

    assert!(matches!(
        apply_prompts(&mut g, t, PromptMode::Add, Some(short)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn prompt_mode_parsing() {
    assert_eq!(
        "prepend:4".parse::<PromptMode>().unwrap(),
        PromptMode::Prepend(4)
    );
    assert!("prepend:0".parse::<PromptMode>().is_err());
    let s: SeveranceSpec = "none,none,mps,gps:0.5".parse().unwrap();
    assert_eq!(s.0[3], Severance::Gps(0.5));
    assert_eq!(s.to_string(), "none,none,mps,gps:0.5");
}

#[test]
fn gps_limits() {
    let mut store = ParamStore::new();
    let mut r = rng(5);
    let attn = Attention::new(&mut store, "a", 8, 2, &mut r).unwrap();
    let x = Tensor::randn([6, 8], 1.0, &mut r);

    let plain = run_attention(&store, &attn, &x, Mixing::Softmax);
    let gps0 = run_attention(&store, &attn, &x, Mixing::Gps(0.0));
    assert!(plain.max_abs_diff(&gps0) < 1e-12);
    assert!(plain.max_abs_diff(&reference_attention(&store, &attn, &x, 0.0)) < 1e-12);

    // α = 1: token i sees only its own value projection.
    let gps1 = run_attention(&store, &attn, &x, Mixing::Gps(1.0));
    let mut g = Graph::inference(&store);
    let xv = g.constant(x.clone());
    let v = attn.v.forward(&mut g, xv).unwrap();
    let o = attn.o.forward(&mut g, v).unwrap();
    assert!(gps1.max_abs_diff(g.value(o)) < 1e-12);

    let mut g = Graph::inference(&store);
    let xv = g.constant(x);
    assert!(attn.forward(&mut g, xv, xv, Mixing::Gps(1.5)).is_err());
}

#[test]
fn gps_half_blend_two_tokens_by_hand() {
    let mut store = ParamStore::new();
    let one = |s: &mut ParamStore, n: &str, w: f64| Linear {
        w: s.add(
            alloc::format!("{n}.w"),
            Tensor::new([1, 1], vec![w]).unwrap(),
        ),
        b: Some(s.add(alloc::format!("{n}.b"), Tensor::zeros([1]))),
        in_dim: 1,
        out_dim: 1,
    };
    let attn = Attention {
        q: one(&mut store, "q", 1.0),
        k: one(&mut store, "k", 2.0),
        v: one(&mut store, "v", 3.0),
        o: one(&mut store, "o", 1.0),
        heads: 1,
        dim: 1,
    };
    let x = Tensor::new([2, 1], vec![0.5, -1.0]).unwrap();
    let got = run_attention(&store, &attn, &x, Mixing::Gps(0.5));
    // q = x, k = 2x, v = 3x, d_head = 1.
    let (q, k, v) = ([0.5, -1.0], [1.0, -2.0], [1.5, -3.0]);
    for i in 0..2 {
        let s0 = q[i] * k[0];
        let s1 = q[i] * k[1];
        let e0 = libm::exp(s0);
        let e1 = libm::exp(s1);
        let a = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let w0 = 0.5 * a[0] + if i == 0 { 0.5 } else { 0.0 };
        let w1 = 0.5 * a[1] + if i == 1 { 0.5 } else { 0.0 };
        let expected = w0 * v[0] + w1 * v[1];
        assert!((got.data()[i] - expected).abs() < 1e-12);
    }
}

/// Direct evaluation of the mask-guided attention row for token `i`.
fn eq1_row(masks: &[Vec<f64>], i: usize) -> Vec<f64> {
    let o = masks[0].len();
    let mut row = vec![0.0; o];
    for mj in masks {
        for p in 0..o {
            row[p] += mj[i] * mj[p];
        }
    }
    let s: f64 = row.iter().sum();
    row.iter().map(|v| v / s).collect()
}

fn mask_set(masks: &[Vec<f64>], h: usize, w: usize) -> MaskSet {
    let data = masks.concat();
    MaskSet::new(Tensor::new([masks.len(), h, w], data).unwrap()).unwrap()
}

#[test]
fn mps_constant_mask_is_uniform() {
    let w = mps_weights(&mask_set(&[vec![1.0; 16]], 4, 4), 0).unwrap();
    assert!(w.data().iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
}

#[test]
fn mps_disjoint_masks_are_block_diagonal() {
    let a: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
    let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
    let w = mps_weights(&mask_set(&[a.clone(), b], 4, 4), 0).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            if (i < 8) != (j < 8) {
                assert_eq!(w.at2(i, j), 0.0);
            }
        }
    }
}

#[test]
fn mps_soft_masks_match_direct_evaluation() {
    let masks = vec![vec![0.9, 0.2, 0.6, 0.1], vec![0.05, 0.7, 0.3, 0.95]];
    let w = mps_weights(&mask_set(&masks, 2, 2), 0).unwrap();
    for i in 0..4 {
        let row = eq1_row(&masks, i);
        for j in 0..4 {
            assert!((w.at2(i, j) - row[j]).abs() < 1e-12);
        }
    }
    // Extra tokens attend to themselves only.
    let w = mps_weights(&mask_set(&masks, 2, 2), 2).unwrap();
    assert_eq!(w.shape(), &[6, 6]);
    assert_eq!(w.row(1), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert!((w.at2(3, 2 + 1) - eq1_row(&masks, 1)[1]).abs() < 1e-12);
}

#[test]
fn mps_zero_row_falls_back_to_self() {
    let masks = vec![vec![1.0, 1.0, 0.0, 0.0]];
    let w = mps_weights(&mask_set(&masks, 2, 2), 0).unwrap();
    assert_eq!(w.row(2), &[0.0, 0.0, 1.0, 0.0]);
    assert!(mps_weights(&MaskSet::new(Tensor::zeros([1, 2, 2])).unwrap(), 0).is_ok());
}

#[test]
fn mps_attention_applies_mask_rows_to_values() {
    let mut store = ParamStore::new();
    let mut r = rng(8);
    let attn = Attention::new(&mut store, "a", 4, 1, &mut r).unwrap();
    let x = Tensor::randn([4, 4], 1.0, &mut r);
    let masks = vec![vec![0.9, 0.2, 0.6, 0.1], vec![0.05, 0.7, 0.3, 0.95]];
    let w = mps_weights(&mask_set(&masks, 2, 2), 0).unwrap();
    let mut g = Graph::inference(&store);
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = attn.forward(&mut g, xv, xv, Mixing::Fixed(wv)).unwrap();
    let vproj = {
        let mut v = x.matmul(store.get(attn.v.w)).unwrap();
        let b = store.get(attn.v.b.unwrap()).clone();
        v.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(k, e)| *e += b.data()[k % 4]);
        v
    };
    let mixed = w.matmul(&vproj).unwrap();
    let mut out = mixed.matmul(store.get(attn.o.w)).unwrap();
    let b = store.get(attn.o.b.unwrap()).clone();
    out.data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(k, e)| *e += b.data()[k % 4]);
    assert!(g.value(y).max_abs_diff(&out) < 1e-12);
}

#[test]
fn encode_default_shape_and_mps_requires_masks() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng(9)).unwrap();
    let image = Tensor::uniform([3, 64, 64], 0.0, 1.0, &mut rng(10));
    let mut g = Graph::inference(&store);
    let f = enc.encode(&mut g, &image, None).unwrap();
    assert_eq!(g.value(f).shape(), &[8, 8, 32]);

    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        severance: "none,none,none,mps".parse().unwrap(),
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg, &mut store, &mut rng(9)).unwrap();
    let mut g = Graph::inference(&store);
    assert!(matches!(
        enc.encode(&mut g, &image, None),
        Err(Error::Config(_))
    ));
    let masks = MaskSet::new(Tensor::uniform([3, 16, 16], 0.0, 1.0, &mut rng(1))).unwrap();
    let f = enc.encode(&mut g, &image, Some(&masks)).unwrap();
    assert_eq!(g.value(f).shape(), &[8, 8, 32]);
}

#[test]
fn encode_without_severance_is_a_plain_vit() {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        severance: SeveranceSpec::none(4),
        prompt: PromptMode::Off,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg, &mut store, &mut rng(11)).unwrap();
    let image = Tensor::uniform([3, 64, 64], 0.0, 1.0, &mut rng(12));
    let mut g = Graph::inference(&store);
    let f = enc.encode(&mut g, &image, None).unwrap();
    let got = g.value(f).clone();

    let mut g = Graph::inference(&store);
    let mut x = enc.patch_embed(&mut g, &image).unwrap();
    for b in &enc.blocks {
        x = b.forward(&mut g, x, Mixing::Softmax).unwrap().0;
    }
    let x = enc.norm.forward(&mut g, x).unwrap();
    assert_eq!(g.value(x).data(), got.data());
}

#[test]
fn fully_severed_encoder_isolates_patches() {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        severance: "gps:1,gps:1,gps:1,gps:1".parse().unwrap(),
        prompt: PromptMode::Off,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg, &mut store, &mut rng(13)).unwrap();
    let image = Tensor::uniform([3, 64, 64], 0.0, 1.0, &mut rng(14));
    let mut perturbed = image.clone();
    // Patch at grid (2, 5) -> token 21.
    for c in 0..3 {
        for dy in 0..8 {
            for dx in 0..8 {
                perturbed.data_mut()[(c * 64 + 16 + dy) * 64 + 40 + dx] += 0.3;
            }
        }
    }
    let trace = |img: &Tensor| {
        let mut g = Graph::inference(&store);
        let t = enc.encode_traced(&mut g, img, None).unwrap();
        g.value(*t.attn_outputs.last().unwrap()).clone()
    };
    let (a, b) = (trace(&image), trace(&perturbed));
    for tok in 0..64 {
        let changed = a.row(tok).iter().zip(b.row(tok)).any(|(x, y)| x != y);
        assert_eq!(changed, tok == 21, "token {tok}");
    }
}

#[test]
fn tiny_encoder_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(tiny_cfg(), &mut store, &mut rng(15)).unwrap();
    let image = Tensor::uniform([3, 16, 16], 0.0, 1.0, &mut rng(16));
    let target = Tensor::randn([4, 4, 8], 1.0, &mut rng(17));
    let ids: Vec<ParamId> = store.ids().collect();
    let err = grad_check_params(&store, &ids, 1e-5, Some(12), |g| {
        let f = enc.encode(g, &image, None)?;
        let t = g.constant(target.clone());
        let p = g.tape.mul(f, t)?;
        let s = g.tape.sigmoid(p)?;
        g.tape.sum(s)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn frozen_body_keeps_weights_and_prompt_trains() {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        num_layers: 2,
        severance: SeveranceSpec::last_layer_gps(2, 1.0),
        prompt: PromptMode::Add,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg, &mut store, &mut rng(18)).unwrap();
    let before = store.clone();
    let trainable = Trainable::none(&store).with(enc.prompt_params());
    let image = Tensor::uniform([3, 16, 16], 0.0, 1.0, &mut rng(19));
    let grads = {
        let mut g = Graph::training(&store, &trainable);
        let f = enc.encode(&mut g, &image, None).unwrap();
        let s = g.tape.sigmoid(f).unwrap();
        let l = g.tape.sum(s).unwrap();
        let gr = g.tape.backward(l).unwrap();
        g.param_grads(&gr)
    };
    Optimizer::sgd(0.1).step(&mut store, &grads).unwrap();
    for id in enc.body_params() {
        assert_eq!(store.get(id), before.get(id), "{}", store.name(id));
    }
    assert_ne!(
        store.get(enc.prompt.unwrap()),
        before.get(enc.prompt.unwrap())
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gps_zero_equals_standard_attention(tokens in 1usize..10, heads in 1usize..4, dh in 1usize..5, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let attn = Attention::new(&mut store, "a", heads * dh, heads, &mut r).unwrap();
        let x = Tensor::randn([tokens, heads * dh], 1.0, &mut r);
        let a = run_attention(&store, &attn, &x, Mixing::Gps(0.0));
        prop_assert!(a.max_abs_diff(&reference_attention(&store, &attn, &x, 0.0)) < 1e-12);
    }

    #[test]
    fn gps_weight_rows_sum_to_one(alpha in 0.0f64..=1.0, tokens in 1usize..10, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let attn = Attention::new(&mut store, "a", 4, 2, &mut r).unwrap();
        let x = Tensor::randn([tokens, 4], 1.0, &mut r);
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        for w in attn.weights(&mut g, xv, xv, Mixing::Gps(alpha)).unwrap() {
            let w = g.value(w);
            for i in 0..tokens {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let out = run_attention(&store, &attn, &x, Mixing::Gps(alpha));
        prop_assert!(out.max_abs_diff(&reference_attention(&store, &attn, &x, alpha)) < 1e-12);
    }

    #[test]
    fn gps_one_has_zero_cross_token_jacobian(tokens in 2usize..8, seed in any::<u64>(), which in 0usize..8, delta in 0.01f64..2.0) {
        let which = which % tokens;
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let attn = Attention::new(&mut store, "a", 4, 2, &mut r).unwrap();
        let x = Tensor::randn([tokens, 4], 1.0, &mut r);
        let mut xp = x.clone();
        for c in 0..4 {
            xp.data_mut()[which * 4 + c] += delta;
        }
        let a = run_attention(&store, &attn, &x, Mixing::Gps(1.0));
        let b = run_attention(&store, &attn, &xp, Mixing::Gps(1.0));
        for i in 0..tokens {
            if i != which {
                prop_assert_eq!(a.row(i), b.row(i));
            }
        }
    }
}

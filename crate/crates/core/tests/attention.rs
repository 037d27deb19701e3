mod common;

use common::{gen, randn, softmax_row};
use emha::attention::*;
use emha::interaction::{dei_layout, ConvVars, DeiVars};
use emha::ndtensor::{Tape, Tensor, Var};
use emha::Error;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Weights {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    convs: Vec<(&'static str, Tensor, Tensor, usize)>,
}

fn weights(g: &mut ChaCha8Rng, cfg: &AttnConfig) -> Weights {
    let d = cfg.d;
    let convs = dei_layout(cfg)
        .into_iter()
        .map(|s| (s.name, randn(g, &s.weight_shape()).map(|v| v * 0.5), randn(g, &[s.c_out]).map(|v| v * 0.1), s.groups))
        .collect();
    Weights { wq: randn(g, &[d, d]), wk: randn(g, &[d, d]), wv: randn(g, &[d, d]), wo: randn(g, &[d, d]), convs }
}

fn bind(tape: &mut Tape, w: &Weights) -> AttnParams {
    let mut dei = DeiVars::default();
    for (name, k, b, groups) in &w.convs {
        let cv = ConvVars { weight: tape.param(k.clone()), bias: tape.param(b.clone()), groups: *groups };
        *dei.slot_mut(name).unwrap() = Some(cv);
    }
    AttnParams {
        wq: tape.param(w.wq.clone()),
        wk: tape.param(w.wk.clone()),
        wv: tape.param(w.wv.clone()),
        wo: tape.param(w.wo.clone()),
        dei,
    }
}

fn run(cfg: &AttnConfig, w: &Weights, x: &Tensor, ctx: &ForwardCtx) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let p = bind(&mut tape, w);
    let xv = tape.constant(x.clone());
    let out = emha_forward(&mut tape, xv, &p, cfg, ctx).unwrap();
    (tape.value(out.out).clone(), out.probs.value(&tape).clone())
}

fn eit(d: usize, m: usize, kernels: Kernels) -> AttnConfig {
    AttnConfig {
        variant: Variant::Eit,
        r: m,
        isi_hidden: 2 * m,
        csi_hidden: 3,
        eeit_hidden: 2 * m,
        kernels,
        ..AttnConfig::mhsa(d, m)
    }
}

fn cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[r, len], |i| t.data()[(i / len) * c + start + i % len])
}

/// Textbook multi-head attention with explicit loops.
fn mhsa_oracle(x: &Tensor, w: &Weights, m: usize, causal: bool) -> Tensor {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let dk = d / m;
    let mm = common::naive_matmul;
    let (q, k, v) = (mm(x, &w.wq), mm(x, &w.wk), mm(x, &w.wv));
    let mut concat = Tensor::zeros(&[t, d]);
    for h in 0..m {
        let (qh, kh, vh) = (cols(&q, h * dk, dk), cols(&k, h * dk, dk), cols(&v, h * dk, dk));
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for c in 0..dk {
                    s += qh.at(&[i, c]) * kh.at(&[j, c]);
                }
                logits[j] = s / (dk as f64).sqrt() + if causal && j > i { MASK_VALUE } else { 0.0 };
            }
            let a = softmax_row(&logits);
            for c in 0..dk {
                let s: f64 = (0..t).map(|j| a[j] * vh.at(&[j, c])).sum();
                concat.set(&[i, h * dk + c], s);
            }
        }
    }
    mm(&concat, &w.wo)
}

#[test]
fn mhsa_matches_loop_oracle() {
    let mut g = gen(11);
    for i in 0..10 {
        let m = [1, 2, 4][i % 3];
        let t = g.gen_range(1..6);
        let causal = i % 2 == 0;
        let cfg = AttnConfig { causal, ..AttnConfig::mhsa(8, m) };
        let w = weights(&mut g, &cfg);
        let x = randn(&mut g, &[t, 8]);
        let (out, _) = run(&cfg, &w, &x, &ForwardCtx::eval());
        assert!(out.max_abs_diff(&mhsa_oracle(&x, &w, m, causal)) < 1e-12);
    }
}

#[test]
fn interaction_free_eit_equals_mhsa() {
    let mut g = gen(12);
    for m in [2, 4] {
        for r in 1..=m {
            for causal in [false, true] {
                let mut cfg = eit(16, m, Kernels::ONES);
                cfg.r = r;
                cfg.causal = causal;
                cfg.enable_isi = false;
                cfg.enable_csi = false;
                let base = AttnConfig { causal, ..AttnConfig::mhsa(16, m) };
                let w = weights(&mut g, &cfg);
                assert!(w.convs.is_empty());
                let x = randn(&mut g, &[5, 16]);
                let (a, pa) = run(&cfg, &w, &x, &ForwardCtx::eval());
                let (b, pb) = run(&base, &w, &x, &ForwardCtx::eval());
                assert!(a.max_abs_diff(&b) <= 1e-12);
                assert!(pa.max_abs_diff(&pb) <= 1e-12);
            }
        }
    }
}

#[test]
fn m2m_maps_match_pairwise_products() {
    let mut g = gen(13);
    for (m, r) in [(4, 4), (4, 2), (3, 3), (3, 1)] {
        let (t, d) = (4, 4 * m);
        let dk = d / m;
        let x = randn(&mut g, &[t, d]);
        let (wq, wk, wv) = (randn(&mut g, &[d, d]), randn(&mut g, &[d, d]), randn(&mut g, &[d, d]));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars: Vec<Var> = [&wq, &wk, &wv].iter().map(|w| tape.param((*w).clone())).collect();
        let heads = project_heads(&mut tape, xv, vars[0], vars[1], vars[2], m).unwrap();
        let s = m2m_logits(&mut tape, &heads, r).unwrap();
        let maps = s.value(&tape).clone();
        assert_eq!(maps.shape(), &[m * r, t, t]);
        let (q, k) = (common::naive_matmul(&x, &wq), common::naive_matmul(&x, &wk));
        for (n, (a, b)) in m2m_pairs(m, r).into_iter().enumerate() {
            for i in 0..t {
                for j in 0..t {
                    let dot: f64 = (0..dk).map(|c| q.at(&[i, a * dk + c]) * k.at(&[j, b * dk + c])).sum();
                    assert!((maps.at(&[n, i, j]) - dot / (dk as f64).sqrt()).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn full_field_order_and_worked_example() {
    let pairs = m2m_pairs(4, 4);
    // 1-based: map 4 is (Q1, K4), map 16 is (Q4, K4)
    assert_eq!(pairs[3], (0, 3));
    assert_eq!(pairs[15], (3, 3));
    for (n, &(a, b)) in pairs.iter().enumerate() {
        assert_eq!((a, b), (n / 4, n % 4));
    }
}

#[test]
fn receptive_field_one_reduces_to_standard_logits() {
    let mut g = gen(14);
    let x = randn(&mut g, &[5, 12]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let ws: Vec<Var> = (0..3).map(|_| tape.param(randn(&mut g, &[12, 12]))).collect();
    let heads = project_heads(&mut tape, xv, ws[0], ws[1], ws[2], 3).unwrap();
    let a = m2m_logits(&mut tape, &heads, 1).unwrap();
    let b = standard_logits(&mut tape, &heads).unwrap();
    assert_eq!(a.value(&tape), b.value(&tape));
}

#[test]
fn head_permutation_equivariance() {
    let mut g = gen(15);
    let (m, d, t) = (4, 16, 5);
    let dk = d / m;
    let cfg = AttnConfig::mhsa(d, m);
    let w = weights(&mut g, &cfg);
    let perm = [2, 0, 3, 1];
    let permute_cols = |t: &Tensor| {
        Tensor::from_fn(&[d, d], |i| {
            let (r, c) = (i / d, i % d);
            t.at(&[r, perm[c / dk] * dk + c % dk])
        })
    };
    let permute_rows = |t: &Tensor| {
        Tensor::from_fn(&[d, d], |i| {
            let (r, c) = (i / d, i % d);
            t.at(&[perm[r / dk] * dk + r % dk, c])
        })
    };
    let pw = Weights {
        wq: permute_cols(&w.wq),
        wk: permute_cols(&w.wk),
        wv: permute_cols(&w.wv),
        wo: permute_rows(&w.wo),
        convs: vec![],
    };
    let x = randn(&mut g, &[t, d]);
    let (a, pa) = run(&cfg, &w, &x, &ForwardCtx::eval());
    let (b, pb) = run(&cfg, &pw, &x, &ForwardCtx::eval());
    assert!(a.max_abs_diff(&b) < 1e-12);
    for (h, &src) in perm.iter().enumerate() {
        assert!(pb.index_axis0(h).max_abs_diff(&pa.index_axis0(src)) < 1e-12);
    }
}

fn all_variant_configs(d: usize, m: usize, causal: bool) -> Vec<AttnConfig> {
    let kernels = if causal { Kernels::ONES } else { Kernels { kh_isi: 3, kw_isi: 3, kh_csi: 1, kw_csi: 3 } };
    let mut out = vec![AttnConfig { causal, ..AttnConfig::mhsa(d, m) }];
    for variant in [Variant::Eit, Variant::EEit] {
        for placement in Placement::ALL {
            out.push(AttnConfig { variant, placement, causal, ..eit(d, m, kernels) });
        }
    }
    out
}

#[test]
fn probabilities_are_row_stochastic() {
    let mut g = gen(16);
    for causal in [false, true] {
        for cfg in all_variant_configs(8, 2, causal) {
            let w = weights(&mut g, &cfg);
            let x = randn(&mut g, &[6, 8]);
            let (_, p) = run(&cfg, &w, &x, &ForwardCtx::eval());
            assert_eq!(p.shape(), &[2, 6, 6]);
            for (r, row) in p.data().chunks(6).enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{cfg:?}");
                assert!(row.iter().all(|&v| v >= 0.0), "{:?} {row:?}", cfg.placement);
                if causal {
                    assert!(row[r % 6 + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}

#[test]
fn causal_outputs_ignore_future_tokens() {
    let mut g = gen(17);
    for cfg in all_variant_configs(8, 2, true) {
        for _ in 0..10 {
            let w = weights(&mut g, &cfg);
            let t = 6;
            let x = randn(&mut g, &[t, 8]);
            let cut = g.gen_range(1..t);
            let mut y = x.clone();
            for v in &mut y.data_mut()[cut * 8..] {
                *v += g.gen_range(-3.0..3.0);
            }
            let (a, _) = run(&cfg, &w, &x, &ForwardCtx::eval());
            let (b, _) = run(&cfg, &w, &y, &ForwardCtx::eval());
            assert_eq!(&a.data()[..cut * 8], &b.data()[..cut * 8], "{:?}/{:?}", cfg.variant, cfg.placement);
        }
    }
}

#[test]
fn causal_interaction_needs_unit_kernels() {
    let mut cfg = eit(8, 2, Kernels { kh_isi: 1, kw_isi: 3, kh_csi: 1, kw_csi: 1 });
    cfg.causal = true;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn head_mask_matches_zeroed_output_blocks() {
    let mut g = gen(18);
    let cfg = eit(8, 4, Kernels::ONES);
    let w = weights(&mut g, &cfg);
    let x = randn(&mut g, &[5, 8]);
    let mask = HeadMask::prune_leading(4, 0.5).unwrap();
    let (masked, _) = run(&cfg, &w, &x, &ForwardCtx { head_mask: Some(mask), ..ForwardCtx::eval() });
    // Rows of W_O belonging to heads 0 and 1 set to zero.
    let mut wz = Weights { wo: w.wo.clone(), convs: w.convs.clone(), ..w };
    wz.wo.data_mut()[..4 * 8].fill(0.0);
    let (zeroed, _) = run(&cfg, &wz, &x, &ForwardCtx::eval());
    assert!(masked.max_abs_diff(&zeroed) < 1e-12);

    let all_off = HeadMask::prune_leading(4, 1.0).unwrap();
    let (none, _) = run(&cfg, &wz, &x, &ForwardCtx { head_mask: Some(all_off), ..ForwardCtx::eval() });
    assert!(none.data().iter().all(|&v| v == 0.0));
}

#[test]
fn shared_attention_uses_first_map() {
    let mut g = gen(19);
    let (m, d, t) = (2, 8, 4);
    let cfg = AttnConfig { shared_attention: true, ..AttnConfig::mhsa(d, m) };
    let w = weights(&mut g, &cfg);
    let x = randn(&mut g, &[t, d]);
    let (out, probs) = run(&cfg, &w, &x, &ForwardCtx::eval());
    let a1 = probs.index_axis0(0);
    let v = common::naive_matmul(&x, &w.wv);
    let av = common::naive_matmul(&a1, &v);
    assert!(out.max_abs_diff(&common::naive_matmul(&av, &w.wo)) < 1e-12);
}

#[test]
fn expansion_mixes_heads_pointwise() {
    let mut g = gen(20);
    let (m, me, t) = (3, 5, 4);
    let a = common::random_maps(&mut g, m, t);
    let we = randn(&mut g, &[me, m]);
    let wr = randn(&mut g, &[m, me]);
    let mut tape = Tape::new();
    let maps = tape.param(a.clone());
    let (ev, rv) = (tape.param(we.clone()), tape.param(wr.clone()));
    let out = attention_expansion(&mut tape, AttnMapStack { maps, domain: Domain::Prob }, ev, rv).unwrap();
    let out = out.value(&tape);
    for i in 0..t {
        for j in 0..t {
            for h in 0..m {
                let mut s = 0.0;
                for e in 0..me {
                    let inner: f64 = (0..m).map(|c| we.at(&[e, c]) * a.at(&[c, i, j])).sum();
                    s += wr.at(&[h, e]) * inner;
                }
                assert!((out.at(&[h, i, j]) - s).abs() < 1e-12);
            }
        }
    }
    let bad = tape.param(randn(&mut g, &[2, m]));
    let bad_r = tape.param(randn(&mut g, &[m, 2]));
    let stack = AttnMapStack { maps, domain: Domain::Prob };
    assert!(attention_expansion(&mut tape, stack, bad, bad_r).is_err());
}

#[test]
fn masks_only_apply_to_logits() {
    let mut tape = Tape::new();
    let maps = tape.param(Tensor::full(&[1, 3, 3], 1.0 / 3.0));
    let s = AttnMapStack { maps, domain: Domain::Prob };
    assert!(matches!(apply_mask(&mut tape, s, MaskMode::Causal), Err(Error::Usage(_))));
}

#[test]
fn padding_mask_zeroes_padded_keys() {
    let mut g = gen(21);
    let mut tape = Tape::new();
    let maps = tape.param(randn(&mut g, &[2, 4, 4]));
    let s = apply_mask(&mut tape, AttnMapStack { maps, domain: Domain::Logit }, MaskMode::Padding(3)).unwrap();
    let p = softmax(&mut tape, s).unwrap();
    for row in p.value(&tape).data().chunks(4) {
        assert_eq!(row[3], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn indivisible_width_is_a_config_error() {
    let cfg = AttnConfig::mhsa(10, 4);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

mod common;

use attnedit::attention::{attention_forward, mla_cache_token, mla_decode_absorbed, rope_apply, AttentionConfig, AttentionWeights, KvCache, MlaConfig, MlaTensors, Variant};
use attnedit::tensor::{Graph, Tensor};
use attnedit::Error;
use common::attn::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;


#[test]
fn gqa_matches_loop_oracle() {
    let cfg = AttentionConfig::gqa(32, 4, 2, 8);
    let ws = weights(&cfg, 1);
    let x = input(16, 32, 2);
    let out = run::<f32>(&cfg, &ws, &x, &[16]);
    let err = max_diff(&as_f64(&out.u), &grouped_oracle(&cfg, &ws, &x));
    assert!(err < 1e-5, "max abs error {err}");
}

#[test]
fn swa_matches_band_oracle() {
    let base = AttentionConfig::gqa(32, 4, 2, 8);
    let x = input(32, 32, 3);
    for w in [1, 4, 8, 32] {
        let cfg = base.to_swa_local(w, false);
        let ws = weights(&cfg, 4);
        let out = run::<f32>(&cfg, &ws, &x, &[32]);
        let err = max_diff(&as_f64(&out.u), &grouped_oracle(&cfg, &ws, &x));
        assert!(err < 1e-5, "w={w}: max abs error {err}");
    }
}

#[test]
fn wide_window_equals_full_attention() {
    let base = AttentionConfig::gqa(32, 4, 2, 8);
    let x = input(20, 32, 5);
    let ws = weights(&base, 6);
    let full = run::<f64>(&base.to_swa_full(false), &ws, &x, &[20]);
    for w in [20, 21, 64] {
        let local = run::<f64>(&base.to_swa_local(w, false), &ws, &x, &[20]);
        assert_eq!(local.u, full.u, "w={w}");
    }
}

#[test]
fn unit_window_returns_own_value() {
    let cfg = AttentionConfig::gqa(16, 4, 2, 4).to_swa_local(1, false);
    let ws = weights(&cfg, 7);
    let x = input(9, 16, 8);
    let out = run::<f64>(&cfg, &ws, &x, &[9]);
    let v = x.matmul(&ws[2]).unwrap();
    for i in 0..9 {
        for h in 0..4 {
            for e in 0..4 {
                assert_eq!(out.sdpa.at(i, h * 4 + e), v.at(i, (h / 2) * 4 + e));
            }
        }
    }
}

#[test]
fn gqa_equals_mha_with_repeated_kv_heads() {
    let gqa = AttentionConfig::gqa(24, 6, 2, 4);
    let mha = AttentionConfig::gqa(24, 6, 6, 4);
    let ws = weights(&gqa, 9);
    let repeat = |w: &Tensor<f64>| {
        Tensor::from_fn([24, 24], |idx| {
            let (r, c) = (idx / 24, idx % 24);
            let (h, e) = (c / 4, c % 4);
            w.at(r, (h / 3) * 4 + e)
        })
    };
    let mws = vec![ws[0].clone(), repeat(&ws[1]), repeat(&ws[2]), ws[3].clone()];
    let x = input(11, 24, 10);
    let a = run::<f64>(&gqa, &ws, &x, &[11]);
    let b = run::<f64>(&mha, &mws, &x, &[11]);
    assert!(a.u.max_abs_diff(&b.u) < 1e-12);
    let err = max_diff(&as_f64(&b.u), &grouped_oracle(&mha, &mws, &x));
    assert!(err < 1e-12, "{err}");
}

#[test]
fn rope_scores_depend_on_relative_offset_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = rand_tensor(&mut rng, [1, 16], 1.0);
    let k = rand_tensor(&mut rng, [1, 16], 1.0);
    let dot = |m: usize, n: usize| {
        let a = rope_apply(&q, &[m], 10_000.0, 16).unwrap();
        let b = rope_apply(&k, &[n], 10_000.0, 16).unwrap();
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
    };
    for (m, n) in [(5, 2), (9, 9), (3, 0), (30, 17)] {
        for s in [1, 7, 100] {
            assert!((dot(m, n) - dot(m + s, n + s)).abs() < 1e-10);
        }
    }
    let mut naive = q.data().to_vec();
    rope_naive(&mut naive, 13, 10_000.0);
    assert!(max_diff(&naive, rope_apply(&q, &[13], 10_000.0, 16).unwrap().data()) < 1e-14);
}

#[test]
fn probabilities_sum_to_one_and_respect_the_band() {
    let base = AttentionConfig::gqa(16, 2, 1, 8);
    let x = input(12, 16, 12);
    for cfg in [base.clone(), base.to_swa_local(3, true), base.to_mla(MlaConfig { d_c: 6, d_r: 4, d_nope: 4, d_v: 8 })] {
        let ws = weights(&cfg, 13);
        let out = run::<f64>(&cfg, &ws, &x, &[5, 7]);
        assert_eq!(out.probs.len(), 2 * cfg.n_heads);
        for p in &out.probs {
            for i in 0..p.rows() {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..p.cols() {
                    let visible = j <= i && cfg.window.map_or(true, |w| i - j < w);
                    if !visible {
                        assert_eq!(p.at(i, j), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn batched_sequences_are_independent() {
    let base = AttentionConfig::gqa(16, 4, 2, 4);
    for cfg in [base.clone(), base.to_swa_local(4, true), base.to_mla(MlaConfig { d_c: 8, d_r: 2, d_nope: 2, d_v: 4 })] {
        let ws = weights(&cfg, 14);
        let x = input(13, 16, 15);
        let both = run::<f64>(&cfg, &ws, &x, &[6, 7]);
        let a = run::<f64>(&cfg, &ws, &x.slice_rows(0, 6).unwrap(), &[6]);
        let b = run::<f64>(&cfg, &ws, &x.slice_rows(6, 7).unwrap(), &[7]);
        assert!(both.u.slice_rows(0, 6).unwrap().max_abs_diff(&a.u) < 1e-12);
        assert!(both.u.slice_rows(6, 7).unwrap().max_abs_diff(&b.u) < 1e-12);
    }
}

#[test]
fn zero_gate_weights_halve_the_output() {
    let cfg = AttentionConfig::gqa(16, 4, 2, 4).to_swa_local(4, true);
    let mut ws = weights(&cfg, 16);
    ws[4] = Tensor::zeros([16, 16]);
    let x = input(10, 16, 17);
    let out = run::<f64>(&cfg, &ws, &x, &[10]);
    let gate = out.gate.unwrap();
    assert!(gate.data().iter().all(|&g| g == 0.5));
    let mut ungated = cfg.clone();
    ungated.gated = false;
    let plain = run::<f64>(&ungated, &ws[..4], &x, &[10]);
    assert_eq!(out.sdpa, plain.sdpa);
    let half: Vec<f64> = plain.u.data().iter().map(|v| 0.5 * v).collect();
    assert!(max_diff(out.u.data(), &half) < 1e-14);
}

#[test]
fn saturated_gate_passes_the_output_through() {
    let cfg = AttentionConfig::gqa(8, 2, 1, 4).to_swa_local(3, true);
    let mut ws = weights(&cfg, 18);
    // Only column 0 of x is nonzero, so `x · W_g` is exactly +20 everywhere.
    ws[4] = Tensor::from_fn([8, 8], |i| if i < 8 { 20.0 } else { 0.0 });
    let x = Tensor::from_fn([6, 8], |i| if i % 8 == 0 { 1.0 } else { 0.0 });
    let mut plain_cfg = cfg.clone();
    plain_cfg.gated = false;
    let gated = run::<f64>(&cfg, &ws, &x, &[6]);
    let plain = run::<f64>(&plain_cfg, &ws[..4], &x, &[6]);
    let sig20 = 1.0 / (1.0 + (-20.0f64).exp());
    assert!(gated.gate.unwrap().data().iter().all(|&g| (g - sig20).abs() < 1e-15));
    assert!(gated.u.max_abs_diff(&plain.u) <= 3e-9 * plain.u.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
}

#[test]
fn gate_matches_scalar_loop_oracle() {
    let cfg = AttentionConfig::gqa(12, 3, 1, 4).to_swa_local(5, true);
    let ws = weights(&cfg, 19);
    let x = input(8, 12, 20);
    let out = run::<f64>(&cfg, &ws, &x, &[8]);
    let gate = out.gate.unwrap();
    for i in 0..8 {
        for j in 0..12 {
            let z: f64 = (0..12).map(|k| x.at(i, k) * ws[4].at(k, j)).sum();
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((gate.at(i, j) - expect).abs() < 1e-14);
        }
    }
    let err = max_diff(out.u.data(), &grouped_oracle(&cfg, &ws, &x));
    assert!(err < 1e-12, "{err}");
}

#[test]
fn mla_with_selector_weights_is_nope_mha_bit_exact() {
    let (mla, mha) = selector_mla_and_nope_mha(21);
    assert_eq!(mla, mha);
}

#[test]
fn incremental_decode_matches_recompute() {
    let base = AttentionConfig::gqa(32, 4, 2, 8);
    let variants = [
        base.clone(),
        base.to_swa_full(true),
        base.to_swa_local(4, true),
        base.to_swa_local(1, false),
        base.to_mla(MlaConfig::desk(64, 8)),
    ];
    let x = input(24, 32, 23);
    for cfg in variants {
        let ws = weights(&cfg, 24);
        let full = run::<f32>(&cfg, &ws, &x, &[24]);
        for chunks in [vec![1; 24], vec![5, 1, 7, 11]] {
            let (inc, cache) = decode_chunks::<f32>(&cfg, &ws, &x, &chunks);
            let err = full.u.max_abs_diff(&inc);
            assert!(err < 1e-5, "{:?} chunks {chunks:?}: {err}", cfg.variant);
            assert_eq!(cache.len(), 24);
        }
    }
}

#[test]
fn cache_footprints_follow_the_formulas() {
    let base = AttentionConfig::gqa(32, 4, 2, 8);
    let x = input(24, 32, 25);
    let m = MlaConfig { d_c: 6, d_r: 2, d_nope: 4, d_v: 8 };
    for t in [1, 3, 4, 5, 24] {
        let cases: [(AttentionConfig, usize); 4] = [
            (base.clone(), 2 * 2 * 8 * t),
            (base.to_swa_full(true), 2 * 2 * 8 * t),
            (base.to_swa_local(4, true), 2 * 2 * 8 * t.min(4)),
            (base.to_mla(m), (6 + 2) * t),
        ];
        for (cfg, expect) in cases {
            let ws = weights(&cfg, 26);
            let (_, cache) = decode_chunks::<f64>(&cfg, &ws, &x.slice_rows(0, t).unwrap(), &vec![1; t]);
            assert_eq!(cache.stored_floats(), expect, "{:?} t={t}", cfg.variant);
        }
    }
}

#[test]
fn absorbed_mla_decode_matches_reconstruction() {
    let m = MlaConfig { d_c: 8, d_r: 4, d_nope: 4, d_v: 16 };
    let base = AttentionConfig::gqa(64, 4, 2, 16);
    let x = input(24, 64, 27);
    for gated in [false, true] {
        let mut cfg = base.to_mla(m);
        cfg.gated = gated;
        let ws = weights(&cfg, 28);
        let (e32, reads) = absorbed_vs_plain::<f32>(&cfg, &ws, &x);
        let (e64, _) = absorbed_vs_plain::<f64>(&cfg, &ws, &x);
        assert!(e32 < 1e-4, "f32 {e32}");
        assert!(e64 < 1e-10, "f64 {e64}");
        assert_eq!(reads, ((8 + 4) * (1..=24).sum::<usize>()) as u64);
    }
    let cfg = base.to_mla(m);
    let ws = weights(&cfg, 29);
    let (e, reads) = absorbed_vs_plain::<f64>(&cfg, &ws, &x.slice_rows(0, 1).unwrap());
    assert!(e < 1e-12);
    assert_eq!(reads, 12);
}

#[test]
fn absorbed_decode_requires_a_cached_token() {
    let cfg = AttentionConfig::gqa(16, 2, 1, 8).to_mla(MlaConfig { d_c: 4, d_r: 2, d_nope: 2, d_v: 8 });
    let st = store(&cfg, &weights(&cfg, 30));
    let mt = MlaTensors::from_store(&st, "").unwrap();
    let mut cache = KvCache::for_config(&cfg).unwrap();
    let err = mla_decode_absorbed(&cfg, &mt, &[0.0; 16], &mut cache).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let mut wrong = KvCache::for_config(&AttentionConfig::gqa(16, 2, 1, 8)).unwrap();
    assert!(matches!(mla_cache_token(&cfg, &mt, &[0.0; 16], &mut wrong), Err(Error::Contract(_))));
}

#[test]
fn config_and_contract_errors() {
    assert!(matches!(AttentionConfig::gqa(16, 3, 2, 4).validate(), Err(Error::Config(_))));
    assert!(matches!(AttentionConfig::gqa(16, 2, 1, 4).to_swa_local(0, true).validate(), Err(Error::Config(_))));
    let mut bad = AttentionConfig::gqa(16, 2, 1, 8);
    bad.variant = Variant::Mla;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let cfg = AttentionConfig::gqa(16, 2, 1, 8);
    let ws: Vec<Tensor<f32>> = weights(&cfg, 31).iter().map(|t| t.cast()).collect();
    let mut g = Graph::<f32>::new();
    let w = AttentionWeights::from_tensors(&mut g, &cfg, &ws, false).unwrap();
    let x = g.constant(Tensor::zeros([6, 16]));
    let mut latent = KvCache::for_config(&cfg.to_mla(MlaConfig { d_c: 4, d_r: 2, d_nope: 2, d_v: 8 })).unwrap();
    let e = attention_forward(&mut g, &cfg, &w, x, &[6], Some(&mut latent)).unwrap_err();
    assert!(matches!(e, Error::Contract(_)));
    let mut full = KvCache::for_config(&cfg).unwrap();
    let e = attention_forward(&mut g, &cfg, &w, x, &[3, 3], Some(&mut full)).unwrap_err();
    assert!(matches!(e, Error::Contract(_)));
    assert!(matches!(attention_forward(&mut g, &cfg, &w, x, &[4], None), Err(Error::Dimension(_))));
}

fn perturbed(x: &Tensor<f64>, row: usize, delta: f64) -> Tensor<f64> {
    let mut y = x.clone();
    let c = y.cols();
    for v in &mut y.data_mut()[row * c..(row + 1) * c] {
        *v += delta;
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_before_a_perturbation_are_untouched(
        seed in 0u64..1000,
        t in 2usize..14,
        frac in 0.0f64..1.0,
        delta in -2.0f64..2.0,
        variant in 0usize..3,
    ) {
        let base = AttentionConfig::gqa(16, 4, 2, 4);
        let cfg = [base.clone(), base.to_swa_local(3, true), base.to_mla(MlaConfig { d_c: 6, d_r: 2, d_nope: 2, d_v: 4 })][variant].clone();
        let ws = weights(&cfg, seed);
        let x = input(t, 16, seed + 1);
        let j = ((t as f64 * frac) as usize).min(t - 1);
        let a = run::<f64>(&cfg, &ws, &x, &[t]);
        let b = run::<f64>(&cfg, &ws, &perturbed(&x, j, delta), &[t]);
        for i in 0..j {
            prop_assert_eq!(a.u.row(i), b.u.row(i));
        }
    }

    #[test]
    fn sliding_window_ignores_distant_perturbations(
        seed in 0u64..1000,
        t in 4usize..20,
        w in 1usize..6,
        frac in 0.0f64..1.0,
        delta in -2.0f64..2.0,
    ) {
        let cfg = AttentionConfig::gqa(16, 4, 2, 4).to_swa_local(w, true);
        let ws = weights(&cfg, seed);
        let x = input(t, 16, seed + 2);
        let j = ((t as f64 * frac) as usize).min(t - 1);
        let a = run::<f64>(&cfg, &ws, &x, &[t]);
        let b = run::<f64>(&cfg, &ws, &perturbed(&x, j, delta), &[t]);
        for i in 0..t {
            if i < j || i >= j + w {
                prop_assert_eq!(a.u.row(i), b.u.row(i));
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, t in 1usize..12, w in 1usize..8) {
        let cfg = AttentionConfig::gqa(8, 2, 2, 4).to_swa_local(w, false);
        let out = run::<f32>(&cfg, &weights(&cfg, seed), &input(t, 8, seed), &[t]);
        for p in &out.probs {
            for i in 0..t {
                let s: f32 = p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
                prop_assert!(p.row(i).iter().all(|&a| a >= 0.0));
            }
        }
    }
}

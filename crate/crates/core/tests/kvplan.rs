use attnedit::attention::{MlaConfig, Variant};
use attnedit::kvplan::{
    full_scale_mla, kv_per_token, kv_ratio, memory_report, qwen3_30b_like, qwen3_8b_like, table1, table1_text, MemoryReport,
};
use attnedit::model::{build_schedule, Model, ModelSpec};
use attnedit::Error;
use proptest::prelude::*;

#[test]
fn full_scale_ratios() {
    let a = qwen3_8b_like();
    let b = qwen3_30b_like();
    let rows_a = table1("8b-like", &a, full_scale_mla(128), 128).unwrap();
    let rows_b = table1("30b-like", &b, full_scale_mla(128), 128).unwrap();
    let pct = |rows: &[attnedit::kvplan::Table1Row], i: usize| (rows[i].exact_percent, rows[i].rounded_percent);
    assert_eq!(pct(&rows_a, 0), (100.0, 100));
    assert_eq!(pct(&rows_a, 1), (28.125, 28));
    assert_eq!(pct(&rows_b, 1), (56.25, 56));
    let (e, r) = pct(&rows_a, 2);
    assert!((e - 100.0 / 6.0).abs() < 1e-12 && r == 17);
    let (e, r) = pct(&rows_b, 2);
    assert!((e - 100.0 / 6.0).abs() < 1e-12 && r == 17);
    // The window is excluded from the ratio but reported separately.
    assert_eq!(rows_a[2].bounded_floats, 30 * 2 * 8 * 128 * 128);
    let text = table1_text(&rows_a);
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn ratio_contracts() {
    let base = ModelSpec::gqa(6, 32, 4, 2, 8, 50, 48);
    let sliding = base.with_gateswa(&build_schedule(6, 5, 1).unwrap(), 4, true).unwrap();
    let mut all_local = sliding.clone();
    for l in &mut all_local.layers {
        *l = l.to_swa_local(4, true);
    }
    assert!(matches!(kv_ratio(&base, &all_local), Err(Error::Contract(_))));
    assert_eq!(kv_ratio(&all_local, &base).unwrap().exact_percent, 0.0);
    let other = ModelSpec::gqa(4, 32, 4, 2, 8, 50, 48);
    assert!(matches!(kv_ratio(&other, &base), Err(Error::Contract(_))));
    let mut broken = base.clone();
    broken.layers[0].variant = Variant::Mla;
    broken.layers[0].mla = None;
    assert!(matches!(kv_per_token(&broken), Err(Error::Config(_))));
}

#[test]
fn memory_report_arithmetic_and_round_trip() {
    let base = ModelSpec::gqa(6, 32, 4, 2, 8, 50, 48);
    let s = base.with_gateswa(&build_schedule(6, 5, 1).unwrap(), 4, true).unwrap();
    let fp = kv_per_token(&s).unwrap();
    assert_eq!(fp.per_token_floats, 32);
    assert_eq!(fp.bounded_floats, 5 * 32 * 4);
    let r = memory_report(&s, 100, 3, 2).unwrap();
    assert_eq!(r.total_bytes, (32 * 100 + 5 * 32 * 4) * 3 * 2);
    assert_eq!(r.total_bytes, r.layers.iter().map(|l| l.unbounded_bytes + l.bounded_bytes).sum::<u64>());
    assert_eq!(MemoryReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    let z = memory_report(&s, 0, 3, 2).unwrap();
    assert_eq!(z.unbounded_bytes, 0);
    assert_eq!(z.bounded_bytes, r.bounded_bytes);
    assert!(r.to_text().contains("SwaLocal"));
}

/// Cache floats actually held after `steps` single-token decodes.
fn live_floats(m: &Model<f32>, steps: usize) -> (u64, u64) {
    let mut caches = m.new_caches().unwrap();
    for t in 0..steps {
        m.decode(&[(t % m.spec.vocab) as u32], &mut caches).unwrap();
    }
    let stored = caches.iter().map(|c| c.stored_floats() as u64).sum();
    let reads = caches.iter().map(|c| c.reads() as u64).sum();
    (stored, reads)
}

#[test]
fn live_decode_matches_formula() {
    let base = ModelSpec::gqa(6, 32, 4, 2, 8, 40, 48);
    let mla = base.with_mla(MlaConfig { d_c: 6, d_r: 2, d_nope: 2, d_v: 8 });
    let swa = base.with_gateswa(&build_schedule(6, 5, 1).unwrap(), 8, true).unwrap();
    for spec in [base, mla, swa] {
        let m = Model::<f32>::init(spec.clone(), 3).unwrap();
        let fp = kv_per_token(&spec).unwrap();
        let (stored, _) = live_floats(&m, 64);
        assert_eq!(stored, fp.per_token_floats * 64 + fp.bounded_floats, "{:?}", spec.layers[1].variant);
    }
}

#[test]
fn rolling_footprint_is_flat_past_the_window() {
    let base = ModelSpec::gqa(2, 16, 2, 1, 8, 30, 24);
    let mut spec = base.clone();
    for l in &mut spec.layers {
        *l = l.to_swa_local(5, false);
    }
    let m = Model::<f32>::init(spec, 4).unwrap();
    assert_eq!(live_floats(&m, 5).0, live_floats(&m, 50).0);
    assert_eq!(live_floats(&m, 5).0, kv_per_token(&m.spec).unwrap().bounded_floats);
}

proptest! {
    #[test]
    fn gateswa_ratio_is_full_layer_share(l in 1usize..120, s in 1usize..8, f in 1usize..4) {
        let base = ModelSpec::gqa(l, 16, 2, 1, 8, 10, 16);
        let sched = build_schedule(l, s, f).unwrap();
        let full = sched.full_layers().len();
        let edited = base.with_gateswa(&sched, 4, true).unwrap();
        let r = kv_ratio(&edited, &base).unwrap();
        prop_assert!((r.exact_percent - 100.0 * full as f64 / l as f64).abs() < 1e-9);
    }

    #[test]
    fn report_is_linear_in_seq_and_batch(seq in 0u64..10_000, batch in 1u64..64) {
        let spec = qwen3_8b_like().with_mla(full_scale_mla(128));
        let r = memory_report(&spec, seq, batch, 2).unwrap();
        prop_assert_eq!(r.total_bytes, 36 * 576 * seq * batch * 2);
    }
}

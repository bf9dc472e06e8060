use attnedit::attention::{MlaConfig, Variant};
use attnedit::model::{
    build_schedule, edit_spec, forward_with_taps, init_edit_params, transplant, EditOptions, EditTarget, InitScheme, Model,
    ModelSpec, TransplantPlan,
};
use attnedit::tensor::{Graph, Tensor};
use attnedit::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_teacher() -> ModelSpec {
    ModelSpec::gqa(3, 32, 4, 2, 8, 50, 48)
}

fn tokens(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()).collect()
}

fn refs(v: &[Vec<u32>]) -> Vec<&[u32]> {
    v.iter().map(Vec::as_slice).collect()
}

fn edited(teacher: &Model<f64>, opts: &EditOptions, seed: u64) -> (Model<f64>, TransplantPlan) {
    let (spec, b) = edit_spec(&teacher.spec, opts).unwrap();
    let plan = TransplantPlan::new(&teacher.spec, &spec, &b, opts.reinit_qkv, opts.init, seed).unwrap();
    let params = transplant(&teacher.params, &spec, &plan).unwrap();
    (Model::new(spec, params).unwrap(), plan)
}

#[test]
fn schedule_examples() {
    let full = |l| build_schedule(l, 5, 1).unwrap().full_layers();
    assert_eq!(full(12), vec![0, 6]);
    assert_eq!(full(6), vec![0]);
    assert_eq!(build_schedule(6, 5, 1).unwrap().sliding_layers(), vec![1, 2, 3, 4, 5]);
    assert_eq!(full(36), vec![0, 6, 12, 18, 24, 30]);
    assert!(matches!(build_schedule(6, 0, 1), Err(Error::Config(_))));
    assert!(matches!(build_schedule(6, 5, 0), Err(Error::Config(_))));
    assert!(matches!(build_schedule(0, 5, 1), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn one_in_six_layers_is_full(l in 1usize..200) {
        let s = build_schedule(l, 5, 1).unwrap();
        prop_assert_eq!(s.full_layers().len(), l.div_ceil(6));
        prop_assert_eq!(s.variants[0], Variant::SwaFull);
        prop_assert_eq!(s.full_layers().len() + s.sliding_layers().len(), l);
    }
}

#[test]
fn identity_edit_is_a_pure_copy() {
    let teacher = Model::<f64>::init(small_teacher(), 1).unwrap();
    let (student, plan) = edited(&teacher, &EditOptions::new(EditTarget::Identity), 2);
    assert!(plan.edit_paths.is_empty());
    let toks = tokens(3, 9, 50, 3);
    assert_eq!(teacher.logits(&refs(&toks)).unwrap(), student.logits(&refs(&toks)).unwrap());
    for name in teacher.params.names() {
        assert_eq!(teacher.params.checksum(name), student.params.checksum(name));
    }
}

#[test]
fn mla_edit_reinitializes_everything_but_o_proj() {
    let teacher = Model::<f64>::init(small_teacher(), 1).unwrap();
    let (student, plan) = edited(&teacher, &EditOptions::new(EditTarget::Mla), 4);
    let mut expect = Vec::new();
    for i in 0..3 {
        for s in ["k_rope", "k_up", "kv_down", "q_proj", "v_up"] {
            expect.push(format!("layers.{i}.attn.{s}"));
        }
    }
    let mut got = plan.edit_paths.clone();
    got.sort();
    expect.sort();
    assert_eq!(got, expect);
    for i in 0..3 {
        let o = format!("layers.{i}.attn.o_proj");
        assert!(plan.keep_paths.contains(&o));
        assert_eq!(student.params.checksum(&o), teacher.params.checksum(&o));
    }
    for name in &plan.keep_paths {
        assert_eq!(student.params.checksum(name), teacher.params.checksum(name), "{name}");
    }
    assert_eq!(plan.keep_paths.len() + plan.edit_paths.len(), student.spec.param_shapes().unwrap().len());
}

#[test]
fn gateswa_edit_adds_only_gates() {
    let teacher = Model::<f64>::init(ModelSpec::gqa(6, 32, 4, 2, 8, 50, 48), 1).unwrap();
    let mut opts = EditOptions::new(EditTarget::Gateswa);
    opts.window = 4;
    let (student, plan) = edited(&teacher, &opts, 5);
    let gates: Vec<String> = (0..6).map(|i| format!("layers.{i}.attn.g_proj")).collect();
    assert_eq!(plan.edit_paths, gates);
    assert_eq!(plan.edited_layers, (0..6).collect::<Vec<_>>());
    assert_eq!(student.spec.schedule().full_layers(), vec![0]);
    assert!(student.spec.layers.iter().all(|a| a.gated));
    for s in ["q_proj", "k_proj", "v_proj", "o_proj"] {
        let n = format!("layers.3.attn.{s}");
        assert_eq!(student.params.checksum(&n), teacher.params.checksum(&n));
    }

    opts.reinit_qkv = true;
    let (_, plan) = edited(&teacher, &opts, 5);
    assert_eq!(plan.edit_paths.len(), 6 * 4);
    assert!(plan.edit_paths.iter().all(|p| !p.ends_with("o_proj")));

    opts.reinit_qkv = false;
    opts.gate_full = false;
    let (student, plan) = edited(&teacher, &opts, 5);
    assert_eq!(plan.edited_layers, vec![1, 2, 3, 4, 5]);
    assert!(!student.spec.layers[0].gated);
}

#[test]
fn keep_path_shape_mismatch_is_a_transplant_error() {
    let teacher = Model::<f64>::init(small_teacher(), 1).unwrap();
    let mut spec = small_teacher();
    spec.ffn_hidden = 40;
    let plan = TransplantPlan::new(&small_teacher(), &spec, &[], false, InitScheme::default(), 0).unwrap();
    assert!(matches!(transplant(&teacher.params, &spec, &plan), Err(Error::Transplant(_))));

    let (mla, b) = edit_spec(&small_teacher(), &EditOptions::new(EditTarget::Mla)).unwrap();
    let mut plan = TransplantPlan::new(&small_teacher(), &mla, &b, false, InitScheme::default(), 0).unwrap();
    let o = plan.keep_paths.iter().position(|p| p.ends_with("o_proj")).unwrap();
    let moved = plan.keep_paths.remove(o);
    plan.edit_paths.push(moved);
    assert!(matches!(plan.validate(&mla), Err(Error::Transplant(_))));
    plan.edit_paths.pop();
    assert!(matches!(plan.validate(&mla), Err(Error::Transplant(_))));
}

#[test]
fn edit_init_is_deterministic_and_zeros_silence_the_branch() {
    let teacher = Model::<f64>::init(small_teacher(), 1).unwrap();
    let (spec, b) = edit_spec(&teacher.spec, &EditOptions::new(EditTarget::Mla)).unwrap();
    let plan = TransplantPlan::new(&teacher.spec, &spec, &b, false, InitScheme::default(), 9).unwrap();
    let a = init_edit_params::<f64>(&spec, &plan).unwrap();
    assert_eq!(a, init_edit_params::<f64>(&spec, &plan).unwrap());

    let mut opts = EditOptions::new(EditTarget::Mla);
    opts.init = InitScheme::from_name("zeros", 1.0).unwrap();
    let (student, plan) = edited(&teacher, &opts, 9);
    let toks = tokens(2, 7, 50, 10);
    let taps = forward_with_taps(&student, &refs(&toks), &plan.edited_layers).unwrap();
    for tap in taps.layers.values() {
        assert!(tap.u.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn default_init_matches_its_nominal_std() {
    let s = InitScheme::default();
    let t: Tensor<f64> = s.sample("probe", [1000, 100], 3);
    let n = t.numel() as f64;
    let mean = t.sum() / n;
    let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let nominal = s.std(1000);
    assert!((std / nominal - 1.0).abs() < 0.05, "std {std} vs {nominal}");
}

#[test]
fn taps_are_consistent_snapshots() {
    let teacher = Model::<f64>::init(small_teacher(), 11).unwrap();
    let toks = tokens(2, 10, 50, 12);
    let plain = teacher.logits(&refs(&toks)).unwrap();
    let none = forward_with_taps(&teacher, &refs(&toks), &[]).unwrap();
    assert_eq!(none.logits, plain);
    assert!(none.layers.is_empty());

    let taps = forward_with_taps(&teacher, &refs(&toks), &[0, 1, 2]).unwrap();
    assert_eq!(taps, forward_with_taps(&teacher, &refs(&toks), &[0, 1, 2]).unwrap());
    for (l, tap) in &taps.layers {
        for i in 0..tap.h_in.numel() {
            let r = tap.h_in.data()[i] + tap.u.data()[i] + tap.ffn.data()[i];
            assert!((r - tap.h_out.data()[i]).abs() < 1e-6);
        }
        if *l > 0 {
            assert_eq!(tap.h_in, taps.layers[&(l - 1)].h_out);
        }
        // Independent attention-branch call on the tapped input.
        let mut g = Graph::new();
        let h = g.constant(tap.h_in.clone());
        let st = teacher.attention_branch(&mut g, *l, h, &[10, 10], None, &|_| false, &mut Vec::new()).unwrap();
        assert!(g.value(st.u).max_abs_diff(&tap.u) < 1e-6);
    }
    assert!(matches!(forward_with_taps(&teacher, &refs(&toks), &[3]), Err(Error::Contract(_))));
}

#[test]
fn cached_decode_matches_full_forward_for_every_student() {
    let teacher = Model::<f64>::init(ModelSpec::gqa(6, 32, 4, 2, 8, 50, 48), 13).unwrap();
    let mut swa = EditOptions::new(EditTarget::Gateswa);
    swa.window = 3;
    let mut mla = EditOptions::new(EditTarget::Mla);
    mla.mla = Some(MlaConfig { d_c: 6, d_r: 2, d_nope: 2, d_v: 8 });
    let toks = tokens(1, 14, 50, 14);
    for opts in [EditOptions::new(EditTarget::Identity), swa, mla] {
        let (student, _) = edited(&teacher, &opts, 15);
        let full = student.logits(&refs(&toks)).unwrap();
        let mut caches = student.new_caches().unwrap();
        let mut rows = Vec::new();
        for chunk in [&toks[0][..5], &toks[0][5..6], &toks[0][6..]] {
            rows.extend_from_slice(student.decode(chunk, &mut caches).unwrap().data());
        }
        let inc = Tensor::new([14, 50], rows).unwrap();
        assert!(full.max_abs_diff(&inc) < 1e-10, "{:?}", opts.target);
    }
}

#[test]
fn greedy_decoding_is_deterministic() {
    let m = Model::<f32>::init(small_teacher(), 16).unwrap();
    let a = m.greedy(&[1, 2, 3], 12).unwrap();
    assert_eq!(a, m.greedy(&[1, 2, 3], 12).unwrap());
    assert_eq!(a.len(), 12);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::<f32>::init(small_teacher().with_mla(MlaConfig::desk(32, 8)), 17).unwrap();
    m.save(dir.path()).unwrap();
    assert_eq!(Model::<f32>::load(dir.path()).unwrap(), m);
}

#[test]
fn out_of_vocab_tokens_are_rejected() {
    let m = Model::<f32>::init(small_teacher(), 18).unwrap();
    assert!(matches!(m.logits(&[&[1, 50]]), Err(Error::Contract(_))));
}

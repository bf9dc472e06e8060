#![allow(dead_code)]

pub mod attn;

use std::collections::{BTreeMap, BTreeSet};

use attnedit::attention::{attention_forward, AttentionWeights, MlaConfig};
use attnedit::distill::{block_loss, cos_loss, kd_loss, model_loss, trainable_names, DistillConfig};
use attnedit::model::{edit_spec, forward_with_taps, transplant, EditOptions, EditTarget, Model, ModelSpec, TransplantPlan};
use attnedit::tensor::{grad_check, GradCheck, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_VOCAB: usize = 64;

pub fn tiny_teacher_spec(layers: usize) -> ModelSpec {
    ModelSpec::gqa(layers, 16, 2, 1, 8, TINY_VOCAB, 24)
}

pub fn tiny_mla() -> MlaConfig {
    MlaConfig { d_c: 6, d_r: 2, d_nope: 4, d_v: 8 }
}

/// The edit targets exercised by gradient and bookkeeping tests.
pub fn edit_cases() -> Vec<(&'static str, EditOptions)> {
    let mut mla = EditOptions::new(EditTarget::Mla);
    mla.mla = Some(tiny_mla());
    let mut swa = EditOptions::new(EditTarget::Gateswa);
    swa.window = 3;
    vec![("mla", mla), ("gateswa", swa)]
}

pub fn edit(teacher: &Model<f64>, opts: &EditOptions, seed: u64) -> (Model<f64>, TransplantPlan) {
    let (spec, b) = edit_spec(&teacher.spec, opts).unwrap();
    let plan = TransplantPlan::new(&teacher.spec, &spec, &b, opts.reinit_qkv, opts.init, seed).unwrap();
    let params = transplant(&teacher.params, &spec, &plan).unwrap();
    (Model::new(spec, params).unwrap(), plan)
}

pub fn tokens(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()).collect()
}

pub fn refs(v: &[Vec<u32>]) -> Vec<&[u32]> {
    v.iter().map(Vec::as_slice).collect()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: [usize; 2], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
}

/// Grad check of the teacher-forced block loss of `layer` with respect to
/// that layer's attention tensors.
pub fn gradcheck_block(teacher: &Model<f64>, student: &Model<f64>, layer: usize, seqs: &[&[u32]], samples: usize) -> GradCheck {
    let taps = forward_with_taps(teacher, seqs, &[layer]).unwrap();
    let tap = &taps.layers[&layer];
    let cfg = student.spec.layers[layer].clone();
    let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let suffixes: Vec<&str> = cfg.param_shapes().unwrap().into_iter().map(|(s, _)| s).collect();
    let params: Vec<Tensor<f64>> =
        suffixes.iter().map(|s| student.params.require(&format!("layers.{layer}.attn.{s}")).unwrap().clone()).collect();
    let norm = student.params.require(&format!("layers.{layer}.attn_norm.weight")).unwrap().clone();
    let eps = student.spec.norm_eps;
    grad_check(
        |g, vars| {
            let h = g.constant(tap.h_in.clone());
            let w = g.constant(norm.clone());
            let x = g.rms_norm(h, w, eps)?;
            let aw = AttentionWeights::from_fn(&cfg, |s| Ok(vars[suffixes.iter().position(|x| *x == s).unwrap()]))?;
            let st = attention_forward(g, &cfg, &aw, x, &lens, None)?;
            block_loss(g, st.u, &tap.u, 1e-6)
        },
        &params,
        1e-5,
        samples,
        layer as u64,
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Kd,
    Cos,
    Model,
}

/// Grad check of a Stage-II objective through the whole student with
/// respect to `names`.
pub fn gradcheck_model(
    teacher: &Model<f64>,
    student: &Model<f64>,
    names: &BTreeSet<String>,
    seqs: &[&[u32]],
    cfg: &DistillConfig,
    objective: Objective,
    samples: usize,
) -> GradCheck {
    let m = cfg.cos_indices(student.spec.n_layers).unwrap();
    let taps = forward_with_taps(teacher, seqs, &m).unwrap();
    let rows: usize = seqs.iter().map(|s| s.len()).sum();
    let mut mask = vec![true; rows];
    mask[rows / 2] = false;
    let names: Vec<String> = names.iter().cloned().collect();
    let params: Vec<Tensor<f64>> = names.iter().map(|n| student.params.require(n).unwrap().clone()).collect();
    grad_check(
        |g, vars| {
            let map: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
            let mg = student.build_with_vars(g, seqs, &map)?;
            let pairs: Vec<(Var, &Tensor<f64>)> = m.iter().map(|&l| (mg.layers[l].h_out, &taps.layers[&l].h_out)).collect();
            match objective {
                Objective::Kd => kd_loss(g, mg.logits, &taps.logits, cfg.tau, &mask),
                Objective::Cos => cos_loss(g, &pairs, &mask),
                Objective::Model => {
                    let kd = kd_loss(g, mg.logits, &taps.logits, cfg.tau, &mask)?;
                    let c = cos_loss(g, &pairs, &mask)?;
                    model_loss(g, kd, Some(c), cfg.lambda_cos)
                }
            }
        },
        &params,
        1e-5,
        samples,
        7,
    )
    .unwrap()
}

pub fn edited_attention(student: &Model<f64>, plan: &TransplantPlan) -> BTreeSet<String> {
    trainable_names(&student.spec, &plan.edited_layers, false).unwrap()
}

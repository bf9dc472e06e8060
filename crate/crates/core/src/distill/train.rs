use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::loss::{block_loss, cos_loss, kd_loss, model_loss};
use super::optim::{clip_scale, grad_norm, AdamWConfig, LrSchedule, OptimizerState};
use crate::data::{curriculum_iter, AssignMode, Batch, CurriculumEvent, CurriculumPlan, DataPlan, MixtureSampler, MixtureSpec};
use crate::model::{forward_with_taps, ActivationTap, Model, ModelSpec, TransplantPlan};
use crate::tensor::{Grads, Graph, Scalar, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub tau: f64,
    pub lambda_cos: f64,
    /// Block-loss denominator guard.
    pub eps: f64,
    /// 1-based layer numbers whose outputs enter the cosine term; `None`
    /// picks round(L/4), round(L/2), round(3L/4).
    pub cos_layers: Option<Vec<usize>>,
    /// Must equal the transplant plan's edited set when given.
    pub edited_layers: Option<Vec<usize>>,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub stage1_lr: LrSchedule,
    pub stage2_lr: LrSchedule,
    pub batch: usize,
    pub seq_len: usize,
    pub adam: AdamWConfig,
    pub clip: Option<f64>,
    /// Train every parameter in Stage II instead of the edited attention.
    pub full_finetune: bool,
    pub skip_stage1: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda_cos: 0.05,
            eps: 1e-6,
            cos_layers: None,
            edited_layers: None,
            stage1_steps: 300,
            stage2_steps: 2000,
            stage1_lr: LrSchedule { peak: 3e-3, warmup: 20, min_ratio: 0.1 },
            stage2_lr: LrSchedule { peak: 1e-3, warmup: 50, min_ratio: 0.1 },
            batch: 8,
            seq_len: 64,
            adam: AdamWConfig::default(),
            clip: Some(1.0),
            full_finetune: false,
            skip_stage1: false,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.tau > 0.0) || !(self.eps > 0.0) || !(self.lambda_cos >= 0.0) {
            return Err(Error::config("tau and eps must be positive, lambda_cos non-negative"));
        }
        if self.batch == 0 || self.seq_len < 2 {
            return Err(Error::config("batch must be positive and seq_len at least 2"));
        }
        for lr in [&self.stage1_lr, &self.stage2_lr] {
            if !(lr.peak > 0.0) || !(0.0..=1.0).contains(&lr.min_ratio) {
                return Err(Error::config(format!("bad learning-rate schedule {lr:?}")));
            }
        }
        self.cos_indices(n_layers).map(drop)
    }

    /// 0-based layer indices of the cosine taps.
    pub fn cos_indices(&self, n_layers: usize) -> Result<Vec<usize>> {
        let m: Vec<usize> = match &self.cos_layers {
            Some(m) => m.clone(),
            None => [0.25, 0.5, 0.75].iter().map(|f| (f * n_layers as f64).round().max(1.0) as usize).collect(),
        };
        if let Some(bad) = m.iter().find(|&&k| k == 0 || k > n_layers) {
            return Err(Error::config(format!("cosine layer {bad} outside 1..={n_layers}")));
        }
        Ok(m.into_iter().map(|k| k - 1).collect::<BTreeSet<_>>().into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub segment: Option<usize>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub block_loss: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub tokens: u64,
    /// Elapsed time since the start of the stage; drop it for byte-stable logs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
}

impl TrainMetrics {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub type MetricsSink<'a> = &'a mut dyn FnMut(&TrainMetrics) -> Result<()>;

/// Names of the parameters Stage II may update: attention tensors of the
/// edited layers, or everything with `full`.
pub fn trainable_names(spec: &ModelSpec, edited: &[usize], full: bool) -> Result<BTreeSet<String>> {
    let prefixes: Vec<String> = edited.iter().map(|i| format!("layers.{i}.attn.")).collect();
    Ok(spec
        .param_shapes()?
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| full || prefixes.iter().any(|p| n.starts_with(p)))
        .collect())
}

fn collect_grads<T: Scalar>(grads: &Grads<T>, params: &[(String, Var)], model: &Model<T>) -> Result<Vec<(String, Vec<T>)>> {
    params
        .iter()
        .map(|(name, v)| {
            let g = match grads.get(*v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); model.params.require(name)?.numel()],
            };
            Ok((name.clone(), g))
        })
        .collect()
}

fn ensure_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is {v}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub block_loss: BTreeMap<usize, f64>,
    pub kd: Option<f64>,
    pub cos: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

/// Stage-I graph: every edited block fed the teacher's residual input.
pub struct Stage1Graph {
    pub losses: Vec<(usize, Var)>,
    pub total: Var,
    pub params: Vec<(String, Var)>,
}

pub fn stage1_objective<T: Scalar>(
    g: &mut Graph<T>,
    student: &Model<T>,
    taps: &ActivationTap<T>,
    layers: &[usize],
    lens: &[usize],
    eps: f64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Stage1Graph> {
    if layers.is_empty() {
        return Err(Error::contract("Stage I needs at least one edited layer"));
    }
    let mut params = Vec::new();
    let mut losses = Vec::with_capacity(layers.len());
    let mut total: Option<Var> = None;
    for &l in layers {
        let tap = taps.layers.get(&l).ok_or_else(|| Error::contract(format!("no teacher tap for layer {l}")))?;
        let h = g.constant(tap.h_in.clone());
        let st = student.attention_branch(g, l, h, lens, None, trainable, &mut params)?;
        let loss = block_loss(g, st.u, &tap.u, eps)?;
        losses.push((l, loss));
        total = Some(match total {
            Some(acc) => g.add(acc, loss)?,
            None => loss,
        });
    }
    Ok(Stage1Graph { losses, total: total.expect("non-empty"), params })
}

/// One teacher-forced regression step over all edited blocks.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step<T: Scalar>(
    taps: &ActivationTap<T>,
    student: &mut Model<T>,
    layers: &[usize],
    lens: &[usize],
    cfg: &DistillConfig,
    trainable: &BTreeSet<String>,
    opt: &mut OptimizerState<T>,
    lr: f64,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let is_trainable = |n: &str| trainable.contains(n);
    let sg = stage1_objective(&mut g, student, taps, layers, lens, cfg.eps, &is_trainable)?;
    let block: BTreeMap<usize, f64> = sg
        .losses
        .iter()
        .map(|&(l, v)| Ok((l, ensure_finite("block loss", g.value(v).item().as_f64())?)))
        .collect::<Result<_>>()?;
    let total = block.values().sum();
    let grads = g.backward(sg.total)?;
    let grads = collect_grads(&grads, &sg.params, student)?;
    drop(g);
    let norm = grad_norm(&grads);
    opt.update(&mut student.params, &grads, lr, clip_scale(norm, cfg.clip))?;
    Ok(StepOutcome { block_loss: block, kd: None, cos: None, total, grad_norm: norm })
}

/// One KD (+ cosine) step of the student against the frozen teacher.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    batch: &Batch,
    cfg: &DistillConfig,
    trainable: &BTreeSet<String>,
    opt: &mut OptimizerState<T>,
    lr: f64,
) -> Result<StepOutcome> {
    if teacher.spec.vocab != student.spec.vocab {
        return Err(Error::contract(format!("vocab mismatch: teacher {} vs student {}", teacher.spec.vocab, student.spec.vocab)));
    }
    let seqs = batch.refs();
    let mask = batch.row_mask();
    let cos_idx = if cfg.lambda_cos > 0.0 { cfg.cos_indices(student.spec.n_layers)? } else { Vec::new() };
    let taps = forward_with_taps(teacher, &seqs, &cos_idx)?;
    let mut g = Graph::new();
    let is_trainable = |n: &str| trainable.contains(n);
    let mg = student.build(&mut g, &seqs, &is_trainable)?;
    let kd = kd_loss(&mut g, mg.logits, &taps.logits, cfg.tau, &mask)?;
    let cos = if cos_idx.is_empty() {
        None
    } else {
        let pairs: Vec<(Var, &_)> = cos_idx.iter().map(|&l| (mg.layers[l].h_out, &taps.layers[&l].h_out)).collect();
        Some(cos_loss(&mut g, &pairs, &mask)?)
    };
    let total = model_loss(&mut g, kd, cos, cfg.lambda_cos)?;
    let kd_v = ensure_finite("kd loss", g.value(kd).item().as_f64())?;
    let cos_v = cos.map(|c| g.value(c).item().as_f64());
    let total_v = ensure_finite("total loss", g.value(total).item().as_f64())?;
    let grads = if mg.params.is_empty() { Vec::new() } else { collect_grads(&g.backward(total)?, &mg.params, student)? };
    drop(g);
    let norm = grad_norm(&grads);
    if !grads.is_empty() {
        opt.update(&mut student.params, &grads, lr, clip_scale(norm, cfg.clip))?;
    }
    Ok(StepOutcome { block_loss: BTreeMap::new(), kd: Some(kd_v), cos: cos_v, total: total_v, grad_norm: norm })
}

/// Optimizer state observed on both sides of a curriculum boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSwitch {
    pub from: usize,
    pub to: usize,
    pub optimizer_step: u64,
    pub moments_before: u64,
    pub moments_after: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProgressiveOutcome {
    pub metrics: Vec<TrainMetrics>,
    pub switches: Vec<SegmentSwitch>,
}

fn metrics(stage: Stage, step: u64, segment: Option<usize>, o: StepOutcome, lr: f64, tokens: u64, t0: Instant) -> TrainMetrics {
    TrainMetrics {
        step,
        stage,
        segment,
        block_loss: o.block_loss,
        kd: o.kd,
        cos: o.cos,
        ce: None,
        total: o.total,
        grad_norm: o.grad_norm,
        lr,
        tokens,
        wall_ms: Some(t0.elapsed().as_secs_f64() * 1e3),
    }
}

fn resolve_edited(cfg: &DistillConfig, plan: &TransplantPlan) -> Result<Vec<usize>> {
    match &cfg.edited_layers {
        Some(b) if *b != plan.edited_layers => {
            Err(Error::contract(format!("configured edited layers {b:?} differ from the plan's {:?}", plan.edited_layers)))
        }
        _ => Ok(plan.edited_layers.clone()),
    }
}

/// Stage-II curriculum whose segments split `steps` full batches as evenly
/// as possible (earlier segments take the remainder); empty segments are
/// dropped.
pub fn stage2_plan(curriculum: &CurriculumPlan, steps: u64, batch: usize, seq_len: usize) -> CurriculumPlan {
    let n = curriculum.segments.len() as u64;
    let per_batch = (batch * seq_len) as u64;
    let mut plan = curriculum.clone();
    plan.segments = curriculum
        .segments
        .iter()
        .enumerate()
        .filter_map(|(k, s)| {
            let k_steps = steps / n + u64::from((k as u64) < steps % n);
            (k_steps > 0).then(|| {
                let mut s = s.clone();
                s.tokens = k_steps * per_batch;
                s
            })
        })
        .collect();
    plan
}

const STAGE2_STREAM: u64 = 0x5eed_0002;

/// Teacher-forced block regression for `cfg.stage1_steps` batches of the
/// Stage-I mixture. Uses its own optimizer.
pub fn run_stage1<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    plan: &TransplantPlan,
    cfg: &DistillConfig,
    data: &DataPlan,
    sink: MetricsSink<'_>,
) -> Result<()> {
    cfg.validate(student.spec.n_layers)?;
    let edited = resolve_edited(cfg, plan)?;
    if cfg.stage1_steps == 0 || edited.is_empty() {
        return Ok(());
    }
    let trainable = trainable_names(&student.spec, &edited, false)?;
    let mut opt = OptimizerState::new(cfg.adam);
    let mixture = data.stage1.segments.first().ok_or_else(|| Error::config("empty Stage-I plan"))?.mixture.clone();
    let mut sampler = MixtureSampler::new(mixture, data.vocab, cfg.seed, data.stage1.mode)?;
    let t0 = Instant::now();
    let mut tokens = 0;
    for step in 0..cfg.stage1_steps {
        let batch = sampler.sample_batch(cfg.batch, cfg.seq_len)?;
        let lens: Vec<usize> = batch.seqs.iter().map(Vec::len).collect();
        let taps = forward_with_taps(teacher, &batch.refs(), &edited)?;
        let lr = cfg.stage1_lr.at(step, cfg.stage1_steps);
        let o = stage1_step(&taps, student, &edited, &lens, cfg, &trainable, &mut opt, lr)?;
        tokens += batch.tokens() as u64;
        sink(&metrics(Stage::Stage1, step, None, o, lr, tokens, t0))?;
    }
    Ok(())
}

/// KD over the curriculum, `cfg.stage2_steps` batches split across its
/// segments. One optimizer spans every segment.
pub fn run_stage2<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    plan: &TransplantPlan,
    cfg: &DistillConfig,
    data: &DataPlan,
    sink: MetricsSink<'_>,
) -> Result<Vec<SegmentSwitch>> {
    cfg.validate(student.spec.n_layers)?;
    let edited = resolve_edited(cfg, plan)?;
    if cfg.stage2_steps == 0 {
        return Ok(Vec::new());
    }
    let trainable = trainable_names(&student.spec, &edited, cfg.full_finetune)?;
    let mut opt = OptimizerState::new(cfg.adam);
    let curriculum = stage2_plan(&data.stage2, cfg.stage2_steps, cfg.batch, cfg.seq_len);
    let total_steps = cfg.stage2_steps;
    let t0 = Instant::now();
    let mut step = 0;
    let mut switches = Vec::new();
    let mut pending: Option<(usize, u64)> = None;
    for ev in curriculum_iter(&curriculum, data.vocab, cfg.batch, cfg.seq_len, cfg.seed ^ STAGE2_STREAM)? {
        match ev {
            CurriculumEvent::Boundary { segment, .. } => {
                if segment + 1 < curriculum.segments.len() {
                    pending = Some((segment, opt.checksum()));
                }
            }
            CurriculumEvent::Batch { segment, batch } => {
                if let Some((from, before)) = pending.take() {
                    switches.push(SegmentSwitch {
                        from,
                        to: segment,
                        optimizer_step: opt.step,
                        moments_before: before,
                        moments_after: opt.checksum(),
                    });
                }
                let lr = cfg.stage2_lr.at(step, total_steps);
                let o = stage2_step(teacher, student, &batch, cfg, &trainable, &mut opt, lr)?;
                let tokens = (step + 1) * (cfg.batch * cfg.seq_len) as u64;
                sink(&metrics(Stage::Stage2, step, Some(segment), o, lr, tokens, t0))?;
                step += 1;
            }
        }
    }
    Ok(switches)
}

/// Stage I (unless skipped) followed by Stage II over the curriculum.
pub fn run_progressive<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    plan: &TransplantPlan,
    cfg: &DistillConfig,
    data: &DataPlan,
    sink: Option<MetricsSink<'_>>,
) -> Result<ProgressiveOutcome> {
    let mut out = ProgressiveOutcome::default();
    let mut noop = |_: &TrainMetrics| Ok(());
    let sink: MetricsSink<'_> = match sink {
        Some(s) => s,
        None => &mut noop,
    };
    let mut record = |m: &TrainMetrics| {
        out.metrics.push(m.clone());
        sink(m)
    };
    if !cfg.skip_stage1 {
        run_stage1(teacher, student, plan, cfg, data, &mut record)?;
    }
    let switches = run_stage2(teacher, student, plan, cfg, data, &mut record)?;
    out.switches = switches;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: LrSchedule,
    pub adam: AdamWConfig,
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            seq_len: 64,
            lr: LrSchedule { peak: 5e-3, warmup: 50, min_ratio: 0.1 },
            adam: AdamWConfig::default(),
            clip: Some(1.0),
            seed: 0,
        }
    }
}

/// Next-token targets for stacked sequences (last position has none).
pub fn next_token_targets(seqs: &[&[u32]]) -> Vec<Option<usize>> {
    seqs.iter()
        .flat_map(|s| (0..s.len()).map(move |t| s.get(t + 1).map(|&x| x as usize)))
        .collect()
}

/// Mean next-token cross-entropy graph node.
pub fn lm_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, seqs: &[&[u32]]) -> Result<Var> {
    let targets = next_token_targets(seqs);
    let n = targets.iter().filter(|t| t.is_some()).count();
    if n == 0 {
        return Err(Error::contract("no next-token targets"));
    }
    g.cross_entropy(logits, &targets, 1.0 / n as f64)
}

/// Language-model training of every parameter on `mixture`.
pub fn pretrain_teacher<T: Scalar>(
    model: &mut Model<T>,
    mixture: &MixtureSpec,
    cfg: &PretrainConfig,
    sink: MetricsSink<'_>,
) -> Result<()> {
    if cfg.batch == 0 || cfg.seq_len < 2 {
        return Err(Error::config("batch must be positive and seq_len at least 2"));
    }
    let all = trainable_names(&model.spec, &[], true)?;
    let mut opt = OptimizerState::new(cfg.adam);
    let mut sampler = MixtureSampler::new(mixture.clone(), model.spec.vocab, cfg.seed, AssignMode::Stratified)?;
    let t0 = Instant::now();
    for step in 0..cfg.steps {
        let batch = sampler.sample_batch(cfg.batch, cfg.seq_len)?;
        let seqs = batch.refs();
        let mut g = Graph::new();
        let is_trainable = |n: &str| all.contains(n);
        let mg = model.build(&mut g, &seqs, &is_trainable)?;
        let loss = lm_loss(&mut g, mg.logits, &seqs)?;
        let ce = ensure_finite("cross-entropy", g.value(loss).item().as_f64())?;
        let grads = collect_grads(&g.backward(loss)?, &mg.params, model)?;
        drop(g);
        let norm = grad_norm(&grads);
        let lr = cfg.lr.at(step, cfg.steps);
        opt.update(&mut model.params, &grads, lr, clip_scale(norm, cfg.clip))?;
        sink(&TrainMetrics {
            step,
            stage: Stage::Pretrain,
            segment: None,
            block_loss: BTreeMap::new(),
            kd: None,
            cos: None,
            ce: Some(ce),
            total: ce,
            grad_norm: norm,
            lr,
            tokens: (step + 1) * batch.tokens() as u64,
            wall_ms: Some(t0.elapsed().as_secs_f64() * 1e3),
        })?;
    }
    Ok(())
}

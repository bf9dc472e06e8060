use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use attnedit::distill::{evaluate, heldout_sequences, pretrain_teacher, run_stage1, run_stage2, Stage, TrainMetrics};
use attnedit::model::{edit_spec, transplant, EditOptions, EditTarget, Model, ModelSpec, TransplantPlan};
use attnedit::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{read_spec, RunConfig};
use crate::{report, Command};

const TRANSPLANT: &str = "transplant.json";
const METRICS: &str = "metrics.jsonl";

/// Provenance written next to an edited checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct TransplantRecord {
    target: EditTarget,
    options: EditOptions,
    plan: TransplantPlan,
    provenance: BTreeMap<String, String>,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::PretrainTeacher { common, out, steps, spec } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let seed = cfg.seed(common.seed);
            let spec = match spec {
                Some(p) => read_spec(&p)?,
                None => cfg.teacher_spec.clone().unwrap_or_else(ModelSpec::desk_teacher),
            };
            let mut pcfg = cfg.pretrain.clone();
            pcfg.seed = seed;
            if let Some(s) = steps {
                pcfg.steps = s;
            }
            pretrain(&cfg, spec, &pcfg, &out)
        }
        Command::Edit { common, teacher, target, out, window, d_c, d_r, reinit_qkv } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let mut opts = cfg.edit.clone();
            opts.target = target.into();
            if let Some(w) = window {
                opts.window = w;
            }
            if d_c.is_some() || d_r.is_some() {
                let t = load(&teacher)?;
                let mut m = opts.mla.unwrap_or_else(|| attnedit::attention::MlaConfig::desk(t.spec.d_model, head_dim(&t.spec)));
                m.d_c = d_c.unwrap_or(m.d_c);
                if let Some(r) = d_r {
                    // Keep the per-head key width.
                    m.d_nope = (m.d_nope + m.d_r).checked_sub(r).filter(|&n| n > 0).ok_or_else(|| Error::Config(format!("d_r {r} leaves no NoPE width")))?;
                    m.d_r = r;
                }
                opts.mla = Some(m);
            }
            opts.reinit_qkv |= reinit_qkv;
            edit(&teacher, opts, cfg.seed(common.seed), &out)
        }
        Command::Distill { common, teacher, student, out, stage1_steps, stage2_steps, skip_stage1, resume, timing } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            let d = &mut cfg.distill;
            d.seed = common.seed.or(cfg.seed).unwrap_or(d.seed);
            if let Some(s) = stage1_steps {
                d.stage1_steps = s;
            }
            if let Some(s) = stage2_steps {
                d.stage2_steps = s;
            }
            d.skip_stage1 |= skip_stage1;
            distill(&cfg, &teacher, &student, &out, resume, timing)
        }
        Command::Eval { common, teacher, student, sequences, seq_len, out } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let t = load(&teacher)?;
            let s = load(&student)?;
            let data = cfg.data_plan(t.spec.vocab)?;
            let held = heldout_sequences(&data.heldout, data.vocab, sequences, seq_len, cfg.seed(common.seed))?;
            let r = evaluate(&t, &s, &held, 16)?;
            emit(&serde_json::to_string_pretty(&r)?, out.as_deref())
        }
        Command::Report { baseline, spec, seq_len, batch, format, parse, metrics, out } => {
            let text = report::run(report::Request { baseline, specs: spec, seq_len, batch, json: format == crate::Format::Json, parse, metrics })?;
            emit(&text, out.as_deref())
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    let text = if text.ends_with('\n') { text.to_string() } else { format!("{text}\n") };
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn head_dim(spec: &ModelSpec) -> usize {
    spec.layers.first().map_or(0, |l| l.head_dim)
}

fn load(dir: &Path) -> Result<Model<f32>> {
    if !dir.join("spec.json").is_file() {
        return Err(Error::Config(format!("{} is not a checkpoint directory", dir.display())));
    }
    Model::load(dir)
}

/// JSONL metrics; wall time is dropped unless asked for so that reruns are
/// byte-identical.
struct MetricsLog {
    w: BufWriter<File>,
    timing: bool,
}

impl MetricsLog {
    fn create(path: &Path, keep: &[String], timing: bool) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        for line in keep {
            writeln!(w, "{line}")?;
        }
        Ok(Self { w, timing })
    }

    fn write(&mut self, m: &TrainMetrics) -> Result<()> {
        let line = if self.timing { m.to_json_line()? } else { TrainMetrics { wall_ms: None, ..m.clone() }.to_json_line()? };
        writeln!(self.w, "{line}")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        Ok(self.w.flush()?)
    }
}

fn pretrain(cfg: &RunConfig, spec: ModelSpec, pcfg: &attnedit::distill::PretrainConfig, out: &Path) -> Result<()> {
    let data = cfg.data_plan(spec.vocab)?;
    let mut model = Model::<f32>::init(spec, pcfg.seed)?;
    std::fs::create_dir_all(out)?;
    let mut log = MetricsLog::create(&out.join(METRICS), &[], false)?;
    let mut last = f64::NAN;
    let res = pretrain_teacher(&mut model, &data.teacher, pcfg, &mut |m: &TrainMetrics| {
        last = m.ce.unwrap_or(m.total);
        log.write(m)
    });
    log.flush()?;
    if let Err(e) = res {
        if matches!(e, Error::Numeric(_)) {
            eprintln!("pretraining diverged; no checkpoint written to {}", out.display());
        }
        return Err(e);
    }
    model.save(out)?;
    let held = heldout_sequences(&data.heldout, data.vocab, 64, pcfg.seq_len, pcfg.seed)?;
    let r = evaluate(&model, &model, &held, 16)?;
    let summary = serde_json::json!({ "steps": pcfg.steps, "final_ce": last, "heldout_ppl": r.teacher_ppl });
    println!("{summary}");
    Ok(())
}

fn edit(teacher_dir: &Path, opts: EditOptions, seed: u64, out: &Path) -> Result<()> {
    let teacher = load(teacher_dir)?;
    let (spec, edited) = edit_spec(&teacher.spec, &opts)?;
    let plan = TransplantPlan::new(&teacher.spec, &spec, &edited, opts.reinit_qkv, opts.init, seed)?;
    let params = transplant(&teacher.params, &spec, &plan)?;
    let student = Model::new(spec, params)?;
    student.save(out)?;
    let provenance = plan.provenance().into_iter().map(|(k, v)| (k, v.to_string())).collect();
    let rec = TransplantRecord { target: opts.target, options: opts, plan, provenance };
    std::fs::write(out.join(TRANSPLANT), serde_json::to_string_pretty(&rec)?)?;
    println!(
        "{}",
        serde_json::json!({ "edited_layers": rec.plan.edited_layers, "kept": rec.plan.keep_paths.len(), "edited": rec.plan.edit_paths.len() })
    );
    Ok(())
}

fn read_plan(student_dir: &Path) -> Result<TransplantRecord> {
    let p = student_dir.join(TRANSPLANT);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn save_stage(model: &Model<f32>, rec: &TransplantRecord, dir: &Path) -> Result<()> {
    model.save(dir)?;
    std::fs::write(dir.join(TRANSPLANT), serde_json::to_string_pretty(rec)?)?;
    Ok(())
}

/// Stage-I lines of an existing log, kept verbatim on resume.
fn stage1_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut keep = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let m: TrainMetrics = serde_json::from_str(&line)?;
        if m.stage == Stage::Stage1 {
            keep.push(line);
        }
    }
    Ok(keep)
}

fn distill(cfg: &RunConfig, teacher_dir: &Path, student_dir: &Path, out: &Path, resume: bool, timing: bool) -> Result<()> {
    let teacher = load(teacher_dir)?;
    let rec = read_plan(student_dir)?;
    let stage1_dir = out.join("stage1");
    let final_dir = out.join("final");
    let mut student = if resume {
        if !stage1_dir.join("spec.json").is_file() {
            return Err(Error::Config(format!("nothing to resume: {} has no Stage-I checkpoint", out.display())));
        }
        load(&stage1_dir)?
    } else {
        load(student_dir)?
    };
    let (t, s) = (&teacher.spec, &student.spec);
    if t.vocab != s.vocab || t.d_model != s.d_model || t.n_layers != s.n_layers {
        return Err(Error::Contract(format!(
            "teacher ({} layers, d_model {}, vocab {}) and student ({} layers, d_model {}, vocab {}) are incompatible",
            t.n_layers, t.d_model, t.vocab, s.n_layers, s.d_model, s.vocab
        )));
    }
    rec.plan.validate(&student.spec)?;
    let dcfg = &cfg.distill;
    let data = cfg.data_plan(teacher.spec.vocab)?;
    std::fs::create_dir_all(out)?;
    let metrics_path = out.join(METRICS);
    let keep = if resume { stage1_lines(&metrics_path)? } else { Vec::new() };
    let mut log = MetricsLog::create(&metrics_path, &keep, timing)?;

    let mut last_good: PathBuf = if resume { stage1_dir.clone() } else { student_dir.to_path_buf() };
    let res = (|| {
        if !resume && !dcfg.skip_stage1 {
            run_stage1(&teacher, &mut student, &rec.plan, dcfg, &data, &mut |m: &TrainMetrics| log.write(m))?;
            log.flush()?;
            save_stage(&student, &rec, &stage1_dir)?;
            last_good = stage1_dir.clone();
        }
        let switches = run_stage2(&teacher, &mut student, &rec.plan, dcfg, &data, &mut |m: &TrainMetrics| log.write(m))?;
        log.flush()?;
        save_stage(&student, &rec, &final_dir)?;
        let sw: Vec<_> = switches
            .iter()
            .map(|s| serde_json::json!({ "from": s.from, "to": s.to, "step": s.optimizer_step, "moments_preserved": s.moments_before == s.moments_after }))
            .collect();
        std::fs::write(out.join("switches.json"), serde_json::to_string_pretty(&sw)?)?;
        Ok(())
    })();
    log.flush()?;
    if let Err(Error::Numeric(msg)) = &res {
        eprintln!("distillation diverged ({msg}); last good checkpoint: {}", last_good.display());
    }
    res
}

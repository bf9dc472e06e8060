use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use attnedit::distill::{Stage, TrainMetrics};
use attnedit::kvplan::{footprint_row, full_scale_mla, memory_report, qwen3_30b_like, qwen3_8b_like, table1, table1_text, MemoryReport, Table1Row};
use attnedit::attention::Variant;
use attnedit::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::read_spec;

pub struct Request {
    pub baseline: Option<PathBuf>,
    pub specs: Vec<PathBuf>,
    pub seq_len: Option<u64>,
    pub batch: u64,
    pub json: bool,
    pub parse: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// The JSON form of a report; `parse` reads it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<Table1Row>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub memory: Vec<MemoryReport>,
}

impl Report {
    fn text(&self) -> String {
        let mut s = table1_text(&self.rows);
        for m in &self.memory {
            s.push('\n');
            s.push_str(&m.to_text());
        }
        s
    }
}

pub fn run(req: Request) -> Result<String> {
    let mut out = String::new();
    if let Some(p) = &req.parse {
        let text = std::fs::read_to_string(p)?;
        let r: Report = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        out = if req.json { serde_json::to_string_pretty(&r)? } else { r.text() };
    } else if req.metrics.is_none() || !req.specs.is_empty() || req.baseline.is_some() {
        let r = build(&req)?;
        out = if req.json { serde_json::to_string_pretty(&r)? } else { r.text() };
    }
    if let Some(m) = &req.metrics {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&curves(m)?);
    }
    Ok(out)
}

fn describe(spec: &attnedit::model::ModelSpec) -> String {
    let count = |v: Variant| spec.layers.iter().filter(|l| l.variant == v).count();
    let parts: Vec<String> = [(Variant::Gqa, "GQA"), (Variant::Mla, "MLA"), (Variant::SwaFull, "full"), (Variant::SwaLocal, "SWA")]
        .into_iter()
        .filter_map(|(v, name)| match count(v) {
            0 => None,
            n => Some(format!("{n}x{name}")),
        })
        .collect();
    parts.join("+")
}

fn build(req: &Request) -> Result<Report> {
    if req.specs.is_empty() {
        if req.baseline.is_some() {
            return Err(Error::Config("--baseline needs at least one --spec".into()));
        }
        let mut rows = table1("8B-like", &qwen3_8b_like(), full_scale_mla(128), 128)?;
        rows.extend(table1("30B-like", &qwen3_30b_like(), full_scale_mla(128), 128)?);
        return Ok(Report { rows, memory: Vec::new() });
    }
    let specs: Vec<_> = req.specs.iter().map(|p| Ok((name(p), read_spec(p)?))).collect::<Result<_>>()?;
    let baseline = match &req.baseline {
        Some(p) => read_spec(p)?,
        None => specs[0].1.clone(),
    };
    let rows = specs.iter().map(|(n, s)| footprint_row(n, &describe(s), s, &baseline)).collect::<Result<_>>()?;
    let memory = match req.seq_len {
        Some(t) => specs.iter().map(|(_, s)| memory_report(s, t, req.batch, 4)).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    Ok(Report { rows, memory })
}

fn name(p: &Path) -> String {
    let p = if p.file_name().is_some_and(|f| f == "spec.json") { p.parent().unwrap_or(p) } else { p };
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Bucketed loss curves, one block per stage.
fn curves(path: &Path) -> Result<String> {
    const BUCKETS: usize = 20;
    const WIDTH: usize = 40;
    let text = std::fs::read_to_string(path)?;
    let metrics: Vec<TrainMetrics> =
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
    let mut s = String::new();
    for stage in [Stage::Pretrain, Stage::Stage1, Stage::Stage2] {
        let ms: Vec<&TrainMetrics> = metrics.iter().filter(|m| m.stage == stage).collect();
        if ms.is_empty() {
            continue;
        }
        let per = ms.len().div_ceil(BUCKETS);
        let means: Vec<(u64, f64)> =
            ms.chunks(per).map(|c| (c[0].step, c.iter().map(|m| m.total).sum::<f64>() / c.len() as f64)).collect();
        let hi = means.iter().map(|m| m.1).fold(f64::MIN, f64::max);
        let _ = writeln!(s, "{} loss ({} steps)", serde_json::to_value(stage)?.as_str().unwrap_or_default(), ms.len());
        for (step, v) in means {
            let bar = if hi > 0.0 { ((v / hi) * WIDTH as f64).round() as usize } else { 0 };
            let _ = writeln!(s, "{step:>7} {v:>10.4} {}", "#".repeat(bar));
        }
    }
    Ok(s)
}

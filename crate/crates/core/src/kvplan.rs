//! Exact KV-cache accounting per attention variant.
//!
//! Counts are in floats. The unbounded component grows with every token;
//! the bounded component is the fixed window capacity of sliding layers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MlaConfig, Variant};
use crate::model::{build_schedule, ModelSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub layer: usize,
    pub variant: Variant,
    pub per_token_floats: u64,
    pub bounded_floats: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheFootprint {
    pub per_token_floats: u64,
    pub bounded_floats: u64,
    pub layers: Vec<LayerFootprint>,
    pub bytes_per_float: usize,
}

fn layer_footprint(i: usize, a: &AttentionConfig) -> Result<LayerFootprint> {
    let kv = 2 * (a.n_kv_heads * a.head_dim) as u64;
    let (per_token, bounded) = match a.variant {
        Variant::Gqa | Variant::SwaFull => (kv, 0),
        Variant::Mla => {
            let m = a.mla_config()?;
            (m.cached_width() as u64, 0)
        }
        Variant::SwaLocal => {
            let w = a.window.ok_or_else(|| Error::config(format!("layer {i}: sliding layer without a window")))?;
            (0, kv * w as u64)
        }
    };
    Ok(LayerFootprint { layer: i, variant: a.variant, per_token_floats: per_token, bounded_floats: bounded })
}

/// Per-token (and bounded) cache floats of a model, 4-byte floats.
pub fn kv_per_token(spec: &ModelSpec) -> Result<CacheFootprint> {
    if spec.layers.len() != spec.n_layers {
        return Err(Error::config("layer configs do not match the layer count"));
    }
    let layers = spec.layers.iter().enumerate().map(|(i, a)| layer_footprint(i, a)).collect::<Result<Vec<_>>>()?;
    Ok(CacheFootprint {
        per_token_floats: layers.iter().map(|l| l.per_token_floats).sum(),
        bounded_floats: layers.iter().map(|l| l.bounded_floats).sum(),
        layers,
        bytes_per_float: 4,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvRatio {
    /// Unbounded per-token floats of the edited model over the baseline's,
    /// in percent.
    pub exact_percent: f64,
    pub rounded_percent: u32,
}

pub fn kv_ratio(edited: &ModelSpec, baseline: &ModelSpec) -> Result<KvRatio> {
    if edited.n_layers != baseline.n_layers {
        return Err(Error::contract(format!("layer counts differ: {} vs {}", edited.n_layers, baseline.n_layers)));
    }
    let e = kv_per_token(edited)?.per_token_floats;
    let b = kv_per_token(baseline)?.per_token_floats;
    if b == 0 {
        return Err(Error::contract("baseline has no per-token cache"));
    }
    let exact = 100.0 * e as f64 / b as f64;
    Ok(KvRatio { exact_percent: exact, rounded_percent: exact.round() as u32 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBytes {
    pub layer: usize,
    pub variant: Variant,
    pub unbounded_bytes: u64,
    pub bounded_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub seq_len: u64,
    pub batch: u64,
    pub bytes_per_float: u64,
    pub per_token_floats: u64,
    pub bounded_floats: u64,
    pub layers: Vec<LayerBytes>,
    pub unbounded_bytes: u64,
    pub bounded_bytes: u64,
    pub total_bytes: u64,
}

/// `(per_token·seq_len + bounded)·batch·bytes_per_float`, with a per-layer
/// split. The bounded term is the full window capacity.
pub fn memory_report(spec: &ModelSpec, seq_len: u64, batch: u64, bytes_per_float: u64) -> Result<MemoryReport> {
    let fp = kv_per_token(spec)?;
    let layers: Vec<LayerBytes> = fp
        .layers
        .iter()
        .map(|l| LayerBytes {
            layer: l.layer,
            variant: l.variant,
            unbounded_bytes: l.per_token_floats * seq_len * batch * bytes_per_float,
            bounded_bytes: l.bounded_floats * batch * bytes_per_float,
        })
        .collect();
    let unbounded: u64 = layers.iter().map(|l| l.unbounded_bytes).sum();
    let bounded: u64 = layers.iter().map(|l| l.bounded_bytes).sum();
    Ok(MemoryReport {
        seq_len,
        batch,
        bytes_per_float,
        per_token_floats: fp.per_token_floats,
        bounded_floats: fp.bounded_floats,
        layers,
        unbounded_bytes: unbounded,
        bounded_bytes: bounded,
        total_bytes: unbounded + bounded,
    })
}

impl MemoryReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seq_len {}  batch {}  {} B/float", self.seq_len, self.batch, self.bytes_per_float);
        let _ = writeln!(s, "{:>5}  {:<10}  {:>16}  {:>14}", "layer", "variant", "unbounded bytes", "bounded bytes");
        for l in &self.layers {
            let _ = writeln!(s, "{:>5}  {:<10}  {:>16}  {:>14}", l.layer, format!("{:?}", l.variant), l.unbounded_bytes, l.bounded_bytes);
        }
        let _ = writeln!(s, "{:>5}  {:<10}  {:>16}  {:>14}", "total", "", self.unbounded_bytes, self.bounded_bytes);
        let _ = writeln!(s, "total bytes {}", self.total_bytes);
        s
    }
}

/// A 36-layer, 8-KV-group backbone (Qwen3-8B-like attention shapes).
pub fn qwen3_8b_like() -> ModelSpec {
    ModelSpec::gqa(36, 4096, 32, 8, 128, 151_936, 12_288)
}

/// A 48-layer, 4-KV-group backbone (Qwen3-30B-A3B-like attention shapes;
/// the expert FFN is not modeled).
pub fn qwen3_30b_like() -> ModelSpec {
    ModelSpec::gqa(48, 2048, 32, 4, 128, 151_936, 6_144)
}

/// The 512/64 latent configuration.
pub fn full_scale_mla(head_dim: usize) -> MlaConfig {
    MlaConfig { d_c: 512, d_r: 64, d_nope: 128, d_v: head_dim }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub model: String,
    pub attention: String,
    pub per_token_floats: u64,
    pub bounded_floats: u64,
    pub exact_percent: f64,
    pub rounded_percent: u32,
}

/// GQA / MLA / GateSWA(5:1, window `window`) rows for `baseline`.
pub fn table1(name: &str, baseline: &ModelSpec, mla: MlaConfig, window: usize) -> Result<Vec<Table1Row>> {
    let sched = build_schedule(baseline.n_layers, 5, 1)?;
    let variants = [
        ("GQA", baseline.clone()),
        ("MLA", baseline.with_mla(mla)),
        ("GateSWA", baseline.with_gateswa(&sched, window, true)?),
    ];
    variants.into_iter().map(|(att, spec)| footprint_row(name, att, &spec, baseline)).collect()
}

/// One table row: the cache of `spec` relative to `baseline`.
pub fn footprint_row(model: &str, attention: &str, spec: &ModelSpec, baseline: &ModelSpec) -> Result<Table1Row> {
    let fp = kv_per_token(spec)?;
    let r = kv_ratio(spec, baseline)?;
    Ok(Table1Row {
        model: model.to_string(),
        attention: attention.to_string(),
        per_token_floats: fp.per_token_floats,
        bounded_floats: fp.bounded_floats,
        exact_percent: r.exact_percent,
        rounded_percent: r.rounded_percent,
    })
}

pub fn table1_text(rows: &[Table1Row]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:<8} {:>16} {:>14} {:>9} {:>6}", "model", "attn", "floats/token", "bounded", "exact %", "KV %");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:<8} {:>16} {:>14} {:>9.3} {:>5}%",
            r.model, r.attention, r.per_token_floats, r.bounded_floats, r.exact_percent, r.rounded_percent
        );
    }
    s
}

//! Decoder assembly, layer schedules and the teacher → student transplant.

mod forward;
mod transplant;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MlaConfig, Variant};
use crate::{Error, Result};

pub use forward::{forward_with_taps, ActivationTap, LayerTap, LayerVars, Model, ModelGraph};
pub use transplant::{edit_spec, init_edit_params, init_params, transplant, EditOptions, EditTarget, InitKind, InitScheme, TransplantPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub ffn_hidden: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    pub layers: Vec<AttentionConfig>,
}

fn default_eps() -> f64 {
    1e-6
}

impl ModelSpec {
    /// Uniform GQA decoder.
    pub fn gqa(n_layers: usize, d_model: usize, n_heads: usize, n_kv_heads: usize, head_dim: usize, vocab: usize, ffn_hidden: usize) -> Self {
        Self {
            n_layers,
            d_model,
            vocab,
            ffn_hidden,
            norm_eps: default_eps(),
            layers: vec![AttentionConfig::gqa(d_model, n_heads, n_kv_heads, head_dim); n_layers],
        }
    }

    /// The reference teacher: small enough to train in CPU-minutes.
    pub fn desk_teacher() -> Self {
        Self::gqa(6, 64, 4, 2, 16, 512, 128)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab == 0 || self.ffn_hidden == 0 {
            return Err(Error::config("model dims must be positive"));
        }
        if self.layers.len() != self.n_layers {
            return Err(Error::config(format!("{} layer configs for {} layers", self.layers.len(), self.n_layers)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        for (i, a) in self.layers.iter().enumerate() {
            a.validate().map_err(|e| Error::config(format!("layer {i}: {e}")))?;
            if a.d_model != self.d_model {
                return Err(Error::config(format!("layer {i}: d_model {} != {}", a.d_model, self.d_model)));
            }
        }
        Ok(())
    }

    /// Every parameter name with its `[rows, cols]` shape, in canonical order.
    pub fn param_shapes(&self) -> Result<Vec<(String, [usize; 2])>> {
        self.validate()?;
        let (d, f) = (self.d_model, self.ffn_hidden);
        let mut out = vec![("embed.weight".to_string(), [self.vocab, d])];
        for (i, a) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm.weight"), [1, d]));
            for (s, shape) in a.param_shapes()? {
                out.push((format!("layers.{i}.attn.{s}"), shape));
            }
            out.push((format!("layers.{i}.ffn_norm.weight"), [1, d]));
            out.push((format!("layers.{i}.mlp.gate_proj"), [d, f]));
            out.push((format!("layers.{i}.mlp.up_proj"), [d, f]));
            out.push((format!("layers.{i}.mlp.down_proj"), [f, d]));
        }
        out.push(("final_norm.weight".to_string(), [1, d]));
        out.push(("lm_head.weight".to_string(), [d, self.vocab]));
        Ok(out)
    }

    pub fn schedule(&self) -> LayerSchedule {
        LayerSchedule { variants: self.layers.iter().map(|a| a.variant).collect() }
    }

    /// Swap every layer to MLA with the given latent dims.
    pub fn with_mla(&self, mla: MlaConfig) -> Self {
        Self { layers: self.layers.iter().map(|a| a.to_mla(mla)).collect(), ..self.clone() }
    }

    /// Swap to GateSWA along `schedule`; `gate_full` also gates the
    /// full-attention layers.
    pub fn with_gateswa(&self, schedule: &LayerSchedule, window: usize, gate_full: bool) -> Result<Self> {
        if schedule.variants.len() != self.n_layers {
            return Err(Error::config("schedule length does not match the layer count"));
        }
        let layers = self
            .layers
            .iter()
            .zip(&schedule.variants)
            .map(|(a, v)| match v {
                Variant::SwaLocal => Ok(a.to_swa_local(window, true)),
                Variant::SwaFull => Ok(a.to_swa_full(gate_full)),
                other => Err(Error::config(format!("GateSWA schedule holds {other:?}"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, ..self.clone() })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-layer attention kinds of a hybrid model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub variants: Vec<Variant>,
}

impl LayerSchedule {
    pub fn full_layers(&self) -> Vec<usize> {
        self.indices(|v| v != Variant::SwaLocal)
    }

    pub fn sliding_layers(&self) -> Vec<usize> {
        self.indices(|v| v == Variant::SwaLocal)
    }

    fn indices(&self, f: impl Fn(Variant) -> bool) -> Vec<usize> {
        self.variants.iter().enumerate().filter(|(_, v)| f(**v)).map(|(i, _)| i).collect()
    }
}

/// Sliding:full interleave. Layer `i` is full iff `i mod (s + f) < f`, so
/// layer 0 is always full and each period of `s + f` layers holds `f` full
/// ones.
pub fn build_schedule(n_layers: usize, ratio_s: usize, ratio_f: usize) -> Result<LayerSchedule> {
    if n_layers == 0 {
        return Err(Error::config("schedule needs at least one layer"));
    }
    if ratio_s < 1 || ratio_f < 1 {
        return Err(Error::config(format!("schedule ratios must be ≥ 1, got {ratio_s}:{ratio_f}")));
    }
    let variants = (0..n_layers)
        .map(|i| if i % (ratio_s + ratio_f) < ratio_f { Variant::SwaFull } else { Variant::SwaLocal })
        .collect();
    Ok(LayerSchedule { variants })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_teacher_is_consistent() {
        let s = ModelSpec::desk_teacher();
        s.validate().unwrap();
        let shapes = s.param_shapes().unwrap();
        assert_eq!(shapes.first().unwrap().1, [512, 64]);
        assert_eq!(shapes.len(), 3 + 6 * 9);
    }

    #[test]
    fn spec_json_round_trip() {
        let s = ModelSpec::desk_teacher().with_mla(MlaConfig::desk(64, 16));
        assert_eq!(ModelSpec::from_json(&s.to_json().unwrap()).unwrap(), s);
    }

    #[test]
    fn layer_count_mismatch_is_rejected() {
        let mut s = ModelSpec::desk_teacher();
        s.layers.pop();
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }
}

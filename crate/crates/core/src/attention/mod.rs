//! GQA, MLA and gated sliding-window attention with their decode caches.

mod absorbed;
mod cache;
mod forward;

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

pub use absorbed::{mla_cache_token, mla_decode_absorbed, MlaTensors};
pub use cache::{FullCache, KvCache, LatentCache, RollingCache};
pub use forward::{attention_forward, gated_output, gqa_forward, mla_forward, rope_apply, swa_forward};

pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Grouped-query attention over the full causal prefix.
    Gqa,
    /// Multi-head latent attention.
    Mla,
    /// Full causal attention inside a GateSWA model.
    SwaFull,
    /// Sliding-window attention inside a GateSWA model.
    SwaLocal,
}

/// Latent attention dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlaConfig {
    /// Width of the shared KV latent.
    pub d_c: usize,
    /// Width of the decoupled rotary key, shared across heads.
    pub d_r: usize,
    /// Non-positional query/key width per head.
    pub d_nope: usize,
    /// Value width per head; equals the source head dim so `o_proj` is reusable.
    pub d_v: usize,
}

impl MlaConfig {
    /// Floats cached per token per layer.
    pub fn cached_width(&self) -> usize {
        self.d_c + self.d_r
    }

    /// The 512/64/64 recipe of 4096-wide models rescaled for a small one. The
    /// latent is scaled by `d_model / 4096`; the rotary and non-positional
    /// widths keep a quarter of the head dim each.
    pub fn desk(d_model: usize, head_dim: usize) -> Self {
        Self {
            d_c: (512 * d_model / 4096).max(2),
            d_r: (head_dim / 4).max(2) & !1,
            d_nope: (head_dim / 4).max(1),
            d_v: head_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Sliding window in tokens, `SwaLocal` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Element-wise sigmoid gate on the SDPA output.
    #[serde(default)]
    pub gated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mla: Option<MlaConfig>,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
}

fn default_theta() -> f64 {
    DEFAULT_ROPE_THETA
}

impl AttentionConfig {
    pub fn gqa(d_model: usize, n_heads: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            variant: Variant::Gqa,
            d_model,
            n_heads,
            n_kv_heads,
            head_dim,
            window: None,
            gated: false,
            mla: None,
            rope_theta: DEFAULT_ROPE_THETA,
        }
    }

    pub fn to_mla(&self, mla: MlaConfig) -> Self {
        Self { variant: Variant::Mla, mla: Some(mla), window: None, gated: false, ..self.clone() }
    }

    pub fn to_swa_local(&self, window: usize, gated: bool) -> Self {
        Self { variant: Variant::SwaLocal, window: Some(window), gated, mla: None, ..self.clone() }
    }

    pub fn to_swa_full(&self, gated: bool) -> Self {
        Self { variant: Variant::SwaFull, window: None, gated, mla: None, ..self.clone() }
    }

    pub fn mla_config(&self) -> Result<MlaConfig> {
        self.mla.ok_or_else(|| Error::config("MLA attention without an MLA config"))
    }

    /// Width of the concatenated per-head SDPA output fed to `o_proj`.
    pub fn attn_width(&self) -> usize {
        match (self.variant, self.mla) {
            (Variant::Mla, Some(m)) => self.n_heads * m.d_v,
            _ => self.n_heads * self.head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::config("attention dims must be positive"));
        }
        match self.variant {
            Variant::Gqa | Variant::SwaFull | Variant::SwaLocal => {
                if self.n_heads % self.n_kv_heads != 0 {
                    return Err(Error::config(format!(
                        "{} query heads do not divide into {} KV groups",
                        self.n_heads, self.n_kv_heads
                    )));
                }
                if self.head_dim % 2 != 0 {
                    return Err(Error::config("rotary head dim must be even"));
                }
            }
            Variant::Mla => {
                let m = self.mla_config()?;
                if m.d_c == 0 {
                    return Err(Error::config("MLA latent width d_c must be at least 1"));
                }
                if m.d_r % 2 != 0 {
                    return Err(Error::config("MLA rotary width d_r must be even"));
                }
                if m.d_v != self.head_dim {
                    return Err(Error::config(format!(
                        "MLA value width {} must equal the source head dim {} to reuse o_proj",
                        m.d_v, self.head_dim
                    )));
                }
            }
        }
        match (self.variant, self.window) {
            (Variant::SwaLocal, None) => Err(Error::config("sliding-window attention needs a window")),
            (Variant::SwaLocal, Some(0)) => Err(Error::config("window must be at least 1")),
            (Variant::SwaLocal, Some(_)) | (_, None) => Ok(()),
            (_, Some(_)) => Err(Error::config("window is only meaningful for sliding-window layers")),
        }
    }

    /// Parameter suffixes and `[in, out]` shapes of this attention module.
    pub fn param_shapes(&self) -> Result<Vec<(&'static str, [usize; 2])>> {
        let d = self.d_model;
        let mut out = match self.variant {
            Variant::Gqa | Variant::SwaFull | Variant::SwaLocal => {
                let kv = self.n_kv_heads * self.head_dim;
                vec![
                    ("q_proj", [d, self.n_heads * self.head_dim]),
                    ("k_proj", [d, kv]),
                    ("v_proj", [d, kv]),
                ]
            }
            Variant::Mla => {
                let m = self.mla_config()?;
                vec![
                    ("q_proj", [d, self.n_heads * (m.d_nope + m.d_r)]),
                    ("kv_down", [d, m.d_c]),
                    ("k_up", [m.d_c, self.n_heads * m.d_nope]),
                    ("v_up", [m.d_c, self.n_heads * m.d_v]),
                    ("k_rope", [d, m.d_r]),
                ]
            }
        };
        out.push(("o_proj", [self.attn_width(), d]));
        if self.gated {
            out.push(("g_proj", [d, self.attn_width()]));
        }
        Ok(out)
    }
}

/// Graph handles of one attention module's weights. Projections are stored
/// `[in, out]` so that `y = x · W`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q_proj: Var,
    pub k_proj: Option<Var>,
    pub v_proj: Option<Var>,
    pub kv_down: Option<Var>,
    pub k_up: Option<Var>,
    pub v_up: Option<Var>,
    pub k_rope: Option<Var>,
    pub o_proj: Var,
    pub g_proj: Option<Var>,
}

impl AttentionWeights {
    /// Binds `{prefix}{suffix}` tensors from `store`; names for which
    /// `trainable` is true become gradient-carrying leaves.
    pub fn bind<T: Scalar>(
        g: &mut Graph<T>,
        cfg: &AttentionConfig,
        store: &ParamStore<T>,
        prefix: &str,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<Self> {
        Self::from_fn(cfg, |suffix| {
            let name = format!("{prefix}{suffix}");
            let t = store.shared(&name)?;
            Ok(if trainable(&name) { g.param_shared(t) } else { g.constant_shared(t) })
        })
    }

    /// Assembles the weights from `get(suffix)` for every suffix the
    /// variant needs.
    pub fn from_fn(cfg: &AttentionConfig, mut get: impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        let mut w = Self {
            q_proj: get("q_proj")?,
            k_proj: None,
            v_proj: None,
            kv_down: None,
            k_up: None,
            v_up: None,
            k_rope: None,
            o_proj: get("o_proj")?,
            g_proj: None,
        };
        match cfg.variant {
            Variant::Mla => {
                w.kv_down = Some(get("kv_down")?);
                w.k_up = Some(get("k_up")?);
                w.v_up = Some(get("v_up")?);
                w.k_rope = Some(get("k_rope")?);
            }
            _ => {
                w.k_proj = Some(get("k_proj")?);
                w.v_proj = Some(get("v_proj")?);
            }
        }
        if cfg.gated {
            w.g_proj = Some(get("g_proj")?);
        }
        Ok(w)
    }

    /// Binds plain tensors given in [`AttentionConfig::param_shapes`] order.
    pub fn from_tensors<T: Scalar>(g: &mut Graph<T>, cfg: &AttentionConfig, tensors: &[Tensor<T>], trainable: bool) -> Result<Self> {
        let shapes = cfg.param_shapes()?;
        if shapes.len() != tensors.len() {
            return Err(Error::contract(format!("expected {} tensors, got {}", shapes.len(), tensors.len())));
        }
        let mut store = ParamStore::new();
        for ((name, shape), t) in shapes.iter().zip(tensors) {
            if t.shape() != shape {
                return Err(Error::dim(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
            store.insert(*name, t.clone());
        }
        Self::bind(g, cfg, &store, "", &|_| trainable)
    }
}

/// Intermediates of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionState {
    /// Queries after RoPE.
    pub q: Var,
    /// Keys read by the attention (cached rows first), after RoPE for GQA/SWA.
    pub k: Var,
    pub v: Var,
    /// MLA shared rotary key.
    pub k_rope: Option<Var>,
    /// MLA latent `c^KV` of the new rows.
    pub latent: Option<Var>,
    /// Concatenated per-head SDPA output; carries α, see
    /// [`Graph::attention_probs`].
    pub sdpa: Var,
    pub gate: Option<Var>,
    /// Post-`o_proj` output, before any residual.
    pub u: Var,
}

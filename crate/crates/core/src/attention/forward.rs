use super::{AttentionConfig, AttentionState, AttentionWeights, KvCache, Variant};
use crate::tensor::{AttentionSpec, Graph, Scalar, Segment, Tensor, Var};
use crate::{Error, Result};

/// Row layout of one attention call: query/key positions and segments.
struct Layout {
    q_pos: Vec<usize>,
    segments: Vec<Segment>,
}

fn batch_layout(rows: usize, lens: &[usize]) -> Result<Layout> {
    if lens.iter().sum::<usize>() != rows {
        return Err(Error::dim(format!("sequence lengths {lens:?} do not cover {rows} rows")));
    }
    let mut q_pos = Vec::with_capacity(rows);
    let mut segments = Vec::with_capacity(lens.len());
    let mut off = 0;
    for &n in lens {
        q_pos.extend(0..n);
        segments.push(Segment { q_start: off, q_len: n, k_start: off, k_len: n });
        off += n;
    }
    Ok(Layout { q_pos, segments })
}

fn check_cached(lens: &[usize], rows: usize) -> Result<()> {
    if lens.len() != 1 || lens[0] != rows {
        return Err(Error::contract("cached attention processes exactly one sequence"));
    }
    Ok(())
}

fn mismatch(cfg: &AttentionConfig, cache: &KvCache<impl Scalar>) -> Error {
    Error::contract(format!("{:?} layer given a {} cache", cfg.variant, cache.kind()))
}

/// `σ(x · W_g) ⊙ o`; returns `(gate, gated output)`.
pub fn gated_output<T: Scalar>(g: &mut Graph<T>, g_proj: Var, x: Var, sdpa: Var) -> Result<(Var, Var)> {
    let logits = g.matmul(x, g_proj)?;
    let gate = g.sigmoid(logits);
    let out = g.mul(gate, sdpa)?;
    Ok((gate, out))
}

/// Value-level RoPE over every `block`-wide column block of `x`.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, positions: &[usize], theta: f64, block: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let r = g.rope(v, positions, theta, block, 0, block)?;
    Ok(g.value(r).clone())
}

/// Dispatches on the configured variant. `x` holds the normalized layer input
/// of all sequences stacked by rows, `lens` their lengths. With a cache, `x`
/// is a single continuation chunk whose first row sits at `cache.len()`.
pub fn attention_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    x: Var,
    lens: &[usize],
    cache: Option<&mut KvCache<T>>,
) -> Result<AttentionState> {
    match cfg.variant {
        Variant::Gqa | Variant::SwaFull | Variant::SwaLocal => grouped(g, cfg, w, x, lens, cache),
        Variant::Mla => mla_forward(g, cfg, w, x, lens, cache),
    }
}

/// Grouped-query attention; also serves full-attention GateSWA layers.
pub fn gqa_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    x: Var,
    lens: &[usize],
    cache: Option<&mut KvCache<T>>,
) -> Result<AttentionState> {
    if !matches!(cfg.variant, Variant::Gqa | Variant::SwaFull) {
        return Err(Error::contract(format!("gqa_forward on a {:?} layer", cfg.variant)));
    }
    grouped(g, cfg, w, x, lens, cache)
}

/// Sliding-window attention: position `i` sees `j` iff `0 ≤ i − j < w`.
pub fn swa_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    x: Var,
    lens: &[usize],
    cache: Option<&mut KvCache<T>>,
) -> Result<AttentionState> {
    if cfg.variant != Variant::SwaLocal {
        return Err(Error::contract(format!("swa_forward on a {:?} layer", cfg.variant)));
    }
    grouped(g, cfg, w, x, lens, cache)
}

fn grouped<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    x: Var,
    lens: &[usize],
    cache: Option<&mut KvCache<T>>,
) -> Result<AttentionState> {
    cfg.validate()?;
    let missing = || Error::contract("grouped attention weights without k_proj/v_proj");
    let (wk, wv) = (w.k_proj.ok_or_else(missing)?, w.v_proj.ok_or_else(missing)?);
    let rows = g.shape(x)[0];
    let hd = cfg.head_dim;
    let (layout, past) = match &cache {
        None => (batch_layout(rows, lens)?, 0),
        Some(c) => {
            check_cached(lens, rows)?;
            let p = c.len();
            (Layout { q_pos: (p..p + rows).collect(), segments: Vec::new() }, p)
        }
    };
    let q = g.matmul(x, w.q_proj)?;
    let q = g.rope(q, &layout.q_pos, cfg.rope_theta, hd, 0, hd)?;
    let k_new = g.matmul(x, wk)?;
    let k_new = g.rope(k_new, &layout.q_pos, cfg.rope_theta, hd, 0, hd)?;
    let v_new = g.matmul(x, wv)?;

    let (k, v, k_pos, segments) = match cache {
        None => (k_new, v_new, layout.q_pos.clone(), layout.segments),
        Some(cache) => {
            let (kc, vc, mut pos) = match (cfg.variant, &mut *cache) {
                (Variant::SwaLocal, KvCache::Rolling(c)) => c.read(),
                (Variant::Gqa | Variant::SwaFull, KvCache::Full(c)) => c.read(),
                _ => return Err(mismatch(cfg, cache)),
            };
            let n_old = pos.len();
            let (k, v) = if n_old == 0 {
                (k_new, v_new)
            } else {
                let (kc, vc) = (g.constant(kc), g.constant(vc));
                (g.concat_rows(&[kc, k_new])?, g.concat_rows(&[vc, v_new])?)
            };
            let (kn, vn) = (g.value(k_new).clone(), g.value(v_new).clone());
            match cache {
                KvCache::Rolling(c) => c.append(&kn, &vn)?,
                KvCache::Full(c) => c.append(&kn, &vn)?,
                KvCache::Latent(_) => unreachable!("variant checked above"),
            }
            pos.extend(past..past + rows);
            let seg = Segment { q_start: 0, q_len: rows, k_start: 0, k_len: n_old + rows };
            (k, v, pos, vec![seg])
        }
    };
    let spec = AttentionSpec {
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        d_qk: hd,
        d_rope: 0,
        d_v: hd,
        scale: 1.0 / (hd as f64).sqrt(),
        segments,
        q_pos: layout.q_pos,
        k_pos,
        window: if cfg.variant == Variant::SwaLocal { cfg.window } else { None },
    };
    let sdpa = g.attention(q, k, None, v, spec)?;
    finish(g, cfg, w, x, AttentionState { q, k, v, k_rope: None, latent: None, sdpa, gate: None, u: sdpa })
}

/// Multi-head latent attention, non-absorbed: keys and values are
/// reconstructed from the latent for every head.
pub fn mla_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    x: Var,
    lens: &[usize],
    cache: Option<&mut KvCache<T>>,
) -> Result<AttentionState> {
    if cfg.variant != Variant::Mla {
        return Err(Error::contract(format!("mla_forward on a {:?} layer", cfg.variant)));
    }
    cfg.validate()?;
    let m = cfg.mla_config()?;
    let missing = || Error::contract("MLA weights incomplete");
    let (w_dkv, w_uk, w_uv, w_kr) = (
        w.kv_down.ok_or_else(missing)?,
        w.k_up.ok_or_else(missing)?,
        w.v_up.ok_or_else(missing)?,
        w.k_rope.ok_or_else(missing)?,
    );
    let rows = g.shape(x)[0];
    let (layout, past) = match &cache {
        None => (batch_layout(rows, lens)?, 0),
        Some(c) => {
            check_cached(lens, rows)?;
            let p = c.len();
            (Layout { q_pos: (p..p + rows).collect(), segments: Vec::new() }, p)
        }
    };
    let dq = m.d_nope + m.d_r;
    let mut q = g.matmul(x, w.q_proj)?;
    let c_new = g.matmul(x, w_dkv)?;
    let mut kr_new = None;
    if m.d_r > 0 {
        q = g.rope(q, &layout.q_pos, cfg.rope_theta, dq, m.d_nope, m.d_r)?;
        let kr = g.matmul(x, w_kr)?;
        kr_new = Some(g.rope(kr, &layout.q_pos, cfg.rope_theta, m.d_r, 0, m.d_r)?);
    }

    let (c_all, kr_all, k_pos, segments) = match cache {
        None => (c_new, kr_new, layout.q_pos.clone(), layout.segments),
        Some(cache) => {
            let KvCache::Latent(lc) = cache else { return Err(mismatch(cfg, cache)) };
            let (cc, krc) = lc.read();
            let n_old = cc.rows();
            let krn = match kr_new {
                Some(kr) => g.value(kr).clone(),
                None => Tensor::zeros([rows, 0]),
            };
            lc.append(g.value(c_new), &krn)?;
            let (c_all, kr_all) = if n_old == 0 {
                (c_new, kr_new)
            } else {
                let cc = g.constant(cc);
                let c_all = g.concat_rows(&[cc, c_new])?;
                let kr_all = match kr_new {
                    Some(kr) => {
                        let krc = g.constant(krc);
                        Some(g.concat_rows(&[krc, kr])?)
                    }
                    None => None,
                };
                (c_all, kr_all)
            };
            let seg = Segment { q_start: 0, q_len: rows, k_start: 0, k_len: n_old + rows };
            (c_all, kr_all, (0..past + rows).collect(), vec![seg])
        }
    };
    let k = g.matmul(c_all, w_uk)?;
    let v = g.matmul(c_all, w_uv)?;
    let spec = AttentionSpec {
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_heads,
        d_qk: m.d_nope,
        d_rope: m.d_r,
        d_v: m.d_v,
        scale: 1.0 / (dq as f64).sqrt(),
        segments,
        q_pos: layout.q_pos,
        k_pos,
        window: None,
    };
    let sdpa = g.attention(q, k, kr_all, v, spec)?;
    let state = AttentionState { q, k, v, k_rope: kr_all, latent: Some(c_new), sdpa, gate: None, u: sdpa };
    finish(g, cfg, w, x, state)
}

fn finish<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    x: Var,
    mut st: AttentionState,
) -> Result<AttentionState> {
    let o = match (cfg.gated, w.g_proj) {
        (false, _) => st.sdpa,
        (true, Some(wg)) => {
            let (gate, o) = gated_output(g, wg, x, st.sdpa)?;
            st.gate = Some(gate);
            o
        }
        (true, None) => return Err(Error::contract("gated layer without g_proj")),
    };
    st.u = g.matmul(o, w.o_proj)?;
    Ok(st)
}

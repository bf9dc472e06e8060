use super::{AttentionConfig, KvCache, Variant};
use crate::tensor::{ParamStore, Scalar, Tensor};
use crate::{Error, Result};

/// Borrowed weights of one MLA layer for graph-free decoding.
#[derive(Debug, Clone, Copy)]
pub struct MlaTensors<'a, T> {
    pub q_proj: &'a Tensor<T>,
    pub kv_down: &'a Tensor<T>,
    pub k_up: &'a Tensor<T>,
    pub v_up: &'a Tensor<T>,
    pub k_rope: &'a Tensor<T>,
    pub o_proj: &'a Tensor<T>,
    pub g_proj: Option<&'a Tensor<T>>,
}

impl<'a, T: Scalar> MlaTensors<'a, T> {
    pub fn from_store(store: &'a ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |s: &str| store.require(&format!("{prefix}{s}"));
        Ok(Self {
            q_proj: get("q_proj")?,
            kv_down: get("kv_down")?,
            k_up: get("k_up")?,
            v_up: get("v_up")?,
            k_rope: get("k_rope")?,
            o_proj: get("o_proj")?,
            g_proj: store.get(&format!("{prefix}g_proj")),
        })
    }
}

fn row_times<T: Scalar>(x: &[T], w: &Tensor<T>) -> Result<Vec<T>> {
    if w.rows() != x.len() {
        return Err(Error::dim(format!("row of width {} times {:?}", x.len(), w.shape())));
    }
    let mut out = vec![T::zero(); w.cols()];
    T::gemm(1, x.len(), w.cols(), T::one(), x, x.len() as isize, 1, w.data(), w.cols() as isize, 1, T::zero(), &mut out, w.cols() as isize, 1);
    Ok(out)
}

/// Rotates interleaved pairs of `x` in place at position `pos`.
fn rope_row<T: Scalar>(x: &mut [T], pos: usize, theta: f64) {
    let width = x.len();
    for p in 0..width / 2 {
        let ang = pos as f64 * theta.powf(-2.0 * p as f64 / width as f64);
        let (s, c) = ang.sin_cos();
        let (a, b) = (x[2 * p].as_f64(), x[2 * p + 1].as_f64());
        x[2 * p] = T::from_f64_lossy(a * c - b * s);
        x[2 * p + 1] = T::from_f64_lossy(a * s + b * c);
    }
}

fn check<T: Scalar>(cfg: &AttentionConfig, w: &MlaTensors<'_, T>, h_t: &[T]) -> Result<()> {
    if cfg.variant != Variant::Mla {
        return Err(Error::contract(format!("absorbed decode on a {:?} layer", cfg.variant)));
    }
    cfg.validate()?;
    if h_t.len() != cfg.d_model {
        return Err(Error::dim(format!("decode input width {} != d_model {}", h_t.len(), cfg.d_model)));
    }
    if cfg.gated != w.g_proj.is_some() {
        return Err(Error::contract("gate weights do not match the layer config"));
    }
    Ok(())
}

/// Appends the latent and shared rotary key of the (normalized) input row
/// `h_t` at position `cache.len()`.
pub fn mla_cache_token<T: Scalar>(cfg: &AttentionConfig, w: &MlaTensors<'_, T>, h_t: &[T], cache: &mut KvCache<T>) -> Result<()> {
    check(cfg, w, h_t)?;
    let m = cfg.mla_config()?;
    let KvCache::Latent(lc) = cache else {
        return Err(Error::contract(format!("MLA layer given a {} cache", cache.kind())));
    };
    let pos = lc.tokens();
    let c = row_times(h_t, w.kv_down)?;
    let mut kr = row_times(h_t, w.k_rope)?;
    rope_row(&mut kr, pos, cfg.rope_theta);
    lc.append(&Tensor::new([1, m.d_c], c)?, &Tensor::new([1, m.d_r], kr)?)
}

/// One decode step for the newest cached token, attending in latent space:
/// `W_UK` is folded into the query and `W_UV` applied after the weighted sum,
/// so per-head keys and values are never materialized. Returns the
/// post-`o_proj` output row.
pub fn mla_decode_absorbed<T: Scalar>(cfg: &AttentionConfig, w: &MlaTensors<'_, T>, h_t: &[T], cache: &mut KvCache<T>) -> Result<Vec<T>> {
    check(cfg, w, h_t)?;
    let m = cfg.mla_config()?;
    let KvCache::Latent(lc) = cache else {
        return Err(Error::contract(format!("MLA layer given a {} cache", cache.kind())));
    };
    if lc.tokens() == 0 {
        return Err(Error::contract("absorbed decode needs the current token cached first"));
    }
    let pos = lc.tokens() - 1;
    let (dn, dr, dc, dv) = (m.d_nope, m.d_r, m.d_c, m.d_v);
    let dq = dn + dr;
    let scale = 1.0 / (dq as f64).sqrt();
    let mut q = row_times(h_t, w.q_proj)?;
    for h in 0..cfg.n_heads {
        rope_row(&mut q[h * dq + dn..(h + 1) * dq], pos, cfg.rope_theta);
    }
    let (c, kr, t) = lc.read_slices();
    let wuk = w.k_up;
    let wuv = w.v_up;
    let mut o = vec![T::zero(); cfg.n_heads * dv];
    let mut q_lat = vec![T::zero(); dc];
    let mut scores = vec![0.0f64; t];
    let mut bar = vec![T::zero(); dc];
    for h in 0..cfg.n_heads {
        let qh = &q[h * dq..(h + 1) * dq];
        for (ci, ql) in q_lat.iter_mut().enumerate() {
            let wrow = &wuk.row(ci)[h * dn..(h + 1) * dn];
            *ql = wrow.iter().zip(&qh[..dn]).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        }
        for (j, s) in scores.iter_mut().enumerate() {
            let cj = &c[j * dc..(j + 1) * dc];
            let krj = &kr[j * dr..(j + 1) * dr];
            let dot: T = q_lat.iter().zip(cj).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                + qh[dn..].iter().zip(krj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            *s = dot.as_f64() * scale;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        bar.iter_mut().for_each(|b| *b = T::zero());
        for (j, s) in scores.iter().enumerate() {
            let a = T::from_f64_lossy((s - mx).exp() / z);
            for (b, &cv) in bar.iter_mut().zip(&c[j * dc..(j + 1) * dc]) {
                *b = *b + a * cv;
            }
        }
        let oh = &mut o[h * dv..(h + 1) * dv];
        for (ci, &b) in bar.iter().enumerate() {
            for (acc, &wv) in oh.iter_mut().zip(&wuv.row(ci)[h * dv..(h + 1) * dv]) {
                *acc = *acc + b * wv;
            }
        }
    }
    if let Some(wg) = w.g_proj {
        let gate = row_times(h_t, wg)?;
        for (oi, gi) in o.iter_mut().zip(gate) {
            *oi = *oi * crate::tensor::sigmoid(gi);
        }
    }
    let u = row_times(&o, w.o_proj)?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite absorbed decode output".into()));
    }
    Ok(u)
}

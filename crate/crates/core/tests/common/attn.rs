use attnedit::attention::{attention_forward, mla_cache_token, mla_decode_absorbed, AttentionConfig, AttentionWeights, KvCache, MlaConfig, MlaTensors};
use attnedit::tensor::{Graph, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 2], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn weights(cfg: &AttentionConfig, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.param_shapes()
        .unwrap()
        .into_iter()
        .map(|(_, s)| rand_tensor(&mut rng, s, (3.0 / s[0] as f64).sqrt()))
        .collect()
}

pub fn store(cfg: &AttentionConfig, ws: &[Tensor<f64>]) -> ParamStore<f64> {
    let mut st = ParamStore::new();
    for ((name, _), t) in cfg.param_shapes().unwrap().iter().zip(ws) {
        st.insert(*name, t.clone());
    }
    st
}

pub struct Out<T> {
    pub u: Tensor<T>,
    pub sdpa: Tensor<T>,
    pub probs: Vec<Tensor<T>>,
    pub gate: Option<Tensor<T>>,
}

pub fn run<T: Scalar>(cfg: &AttentionConfig, ws: &[Tensor<f64>], x: &Tensor<f64>, lens: &[usize]) -> Out<T> {
    let mut g = Graph::<T>::new();
    let tensors: Vec<Tensor<T>> = ws.iter().map(|t| t.cast()).collect();
    let w = AttentionWeights::from_tensors(&mut g, cfg, &tensors, false).unwrap();
    let xv = g.constant(x.cast());
    let st = attention_forward(&mut g, cfg, &w, xv, lens, None).unwrap();
    Out {
        u: g.value(st.u).clone(),
        sdpa: g.value(st.sdpa).clone(),
        probs: g.attention_probs(st.sdpa).unwrap().to_vec(),
        gate: st.gate.map(|v| g.value(v).clone()),
    }
}

pub fn mm(a: &[f64], ar: usize, ac: usize, b: &Tensor<f64>) -> Vec<f64> {
    assert_eq!(b.rows(), ac);
    let bc = b.cols();
    let mut out = vec![0.0; ar * bc];
    for i in 0..ar {
        for k in 0..ac {
            for j in 0..bc {
                out[i * bc + j] += a[i * ac + k] * b.at(k, j);
            }
        }
    }
    out
}

pub fn rope_naive(row: &mut [f64], pos: usize, theta: f64) {
    let d = row.len();
    for p in 0..d / 2 {
        let w = 1.0 / theta.powf((2 * p) as f64 / d as f64);
        let (s, c) = (pos as f64 * w).sin_cos();
        let (a, b) = (row[2 * p], row[2 * p + 1]);
        row[2 * p] = a * c - b * s;
        row[2 * p + 1] = a * s + b * c;
    }
}

/// Per-position loop oracle for grouped attention with an optional band.
pub fn grouped_oracle(cfg: &AttentionConfig, ws: &[Tensor<f64>], x: &Tensor<f64>) -> Vec<f64> {
    let (t, d) = (x.rows(), x.cols());
    let (nh, ng, hd) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
    let mut q = mm(x.data(), t, d, &ws[0]);
    let mut k = mm(x.data(), t, d, &ws[1]);
    let v = mm(x.data(), t, d, &ws[2]);
    for i in 0..t {
        for h in 0..nh {
            rope_naive(&mut q[i * nh * hd + h * hd..][..hd], i, cfg.rope_theta);
        }
        for h in 0..ng {
            rope_naive(&mut k[i * ng * hd + h * hd..][..hd], i, cfg.rope_theta);
        }
    }
    let mut o = vec![0.0; t * nh * hd];
    for i in 0..t {
        for h in 0..nh {
            let gk = h * ng / nh;
            let js: Vec<usize> = (0..=i).filter(|&j| cfg.window.map_or(true, |w| i - j < w)).collect();
            let s: Vec<f64> = js
                .iter()
                .map(|&j| (0..hd).map(|e| q[i * nh * hd + h * hd + e] * k[j * ng * hd + gk * hd + e]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for (jj, &j) in js.iter().enumerate() {
                let a = (s[jj] - m).exp() / z;
                for e in 0..hd {
                    o[i * nh * hd + h * hd + e] += a * v[j * ng * hd + gk * hd + e];
                }
            }
        }
    }
    if cfg.gated {
        let gl = mm(x.data(), t, d, &ws[4]);
        for (oi, gi) in o.iter_mut().zip(gl) {
            *oi *= 1.0 / (1.0 + (-gi).exp());
        }
    }
    mm(&o, t, nh * hd, &ws[3])
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn as_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn input(t: usize, d: usize, seed: u64) -> Tensor<f64> {
    rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), [t, d], 1.0)
}

pub fn decode_chunks<T: Scalar>(cfg: &AttentionConfig, ws: &[Tensor<f64>], x: &Tensor<f64>, chunks: &[usize]) -> (Tensor<T>, KvCache<T>) {
    let tensors: Vec<Tensor<T>> = ws.iter().map(|t| t.cast()).collect();
    let mut cache = KvCache::for_config(cfg).unwrap();
    let mut rows = Vec::new();
    let mut off = 0;
    for &n in chunks {
        let mut g = Graph::<T>::new();
        let w = AttentionWeights::from_tensors(&mut g, cfg, &tensors, false).unwrap();
        let xv = g.constant(x.slice_rows(off, n).unwrap().cast());
        let st = attention_forward(&mut g, cfg, &w, xv, &[n], Some(&mut cache)).unwrap();
        rows.extend_from_slice(g.value(st.u).data());
        off += n;
    }
    (Tensor::new([off, x.cols()], rows).unwrap(), cache)
}

pub fn absorbed_vs_plain<T: Scalar>(cfg: &AttentionConfig, ws: &[Tensor<f64>], x: &Tensor<f64>) -> (f64, u64) {
    let (plain, _) = decode_chunks::<T>(cfg, ws, x, &vec![1; x.rows()]);
    let st: ParamStore<T> = store(cfg, ws).cast();
    let mt = MlaTensors::from_store(&st, "").unwrap();
    let mut cache = KvCache::for_config(cfg).unwrap();
    let mut err = 0.0f64;
    for i in 0..x.rows() {
        let h: Vec<T> = x.row(i).iter().map(|&v| T::from_f64_lossy(v)).collect();
        mla_cache_token(cfg, &mt, &h, &mut cache).unwrap();
        let u = mla_decode_absorbed(cfg, &mt, &h, &mut cache).unwrap();
        for (a, b) in u.iter().zip(plain.row(i)) {
            err = err.max((a.as_f64() - b.as_f64()).abs());
        }
    }
    (err, cache.reads())
}

/// MLA whose latent holds [k; v] verbatim (selector up-projections, no
/// RoPE part) next to the NoPE multi-head reference built from graph ops.
pub fn selector_mla_and_nope_mha(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let (d, nh, hd) = (16, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wq = rand_tensor(&mut rng, [d, nh * hd], 0.5);
    let wk = rand_tensor(&mut rng, [d, nh * hd], 0.5);
    let wv = rand_tensor(&mut rng, [d, nh * hd], 0.5);
    let wo = rand_tensor(&mut rng, [nh * hd, d], 0.5);
    let dc = 2 * nh * hd;
    let w_dkv = Tensor::from_fn([d, dc], |i| {
        let (r, c) = (i / dc, i % dc);
        if c < nh * hd { wk.at(r, c) } else { wv.at(r, c - nh * hd) }
    });
    let w_uk = Tensor::from_fn([dc, nh * hd], |i| if i / (nh * hd) == i % (nh * hd) { 1.0 } else { 0.0 });
    let w_uv = Tensor::from_fn([dc, nh * hd], |i| if i / (nh * hd) == i % (nh * hd) + nh * hd { 1.0 } else { 0.0 });
    let cfg = AttentionConfig::gqa(d, nh, nh, hd).to_mla(MlaConfig { d_c: dc, d_r: 0, d_nope: hd, d_v: hd });
    let ws = vec![wq.clone(), w_dkv, w_uk, w_uv, Tensor::zeros([d, 0]), wo.clone()];
    let x = input(10, d, 22);
    let mla = run::<f64>(&cfg, &ws, &x, &[10]).u;

    // No-position multi-head reference assembled directly from graph ops.
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let (q, k, v, o) = (g.constant(wq), g.constant(wk), g.constant(wv), g.constant(wo));
    let (q, k, v) = (g.matmul(xv, q).unwrap(), g.matmul(xv, k).unwrap(), g.matmul(xv, v).unwrap());
    let spec = attnedit::tensor::AttentionSpec {
        n_heads: nh,
        n_kv_heads: nh,
        d_qk: hd,
        d_rope: 0,
        d_v: hd,
        scale: 1.0 / (hd as f64).sqrt(),
        segments: vec![attnedit::tensor::Segment { q_start: 0, q_len: 10, k_start: 0, k_len: 10 }],
        q_pos: (0..10).collect(),
        k_pos: (0..10).collect(),
        window: None,
    };
    let s = g.attention(q, k, None, v, spec).unwrap();
    let u = g.matmul(s, o).unwrap();
    (mla, g.value(u).clone())
}

use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rows of queries attending to rows of keys. Queries in a segment only ever
/// see keys of the same segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Layout of a fused scaled-dot-product attention.
///
/// Queries are laid out per head as `[nope (d_qk) | rope (d_rope)]`. Keys have
/// `n_kv_heads` blocks of width `d_qk`; the optional shared key of width
/// `d_rope` is read by every head. Query head `h` reads key/value head
/// `h / (n_heads / n_kv_heads)`.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_qk: usize,
    pub d_rope: usize,
    pub d_v: usize,
    pub scale: f64,
    pub segments: Vec<Segment>,
    /// Absolute position of every query row.
    pub q_pos: Vec<usize>,
    /// Absolute position of every key row.
    pub k_pos: Vec<usize>,
    /// Sliding window in tokens; `None` is full causal attention.
    pub window: Option<usize>,
}

impl AttentionSpec {
    pub fn visible(&self, q_pos: usize, k_pos: usize) -> bool {
        k_pos <= q_pos && self.window.is_none_or(|w| q_pos - k_pos < w)
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Silu(Var),
    Softmax(Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<T> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T>, block: usize, offset: usize, width: usize },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    SumSq(Var),
    Attention { q: Var, k: Var, k_shared: Option<Var>, v: Var, spec: Box<AttentionSpec>, probs: Vec<Tensor<T>> },
    Kd { z: Var, p_teacher: Vec<T>, p_student: Vec<T>, rows: Vec<bool>, factor: T },
    Cosine { a: Var, target: Tensor<T>, rows: Vec<bool>, factor: T },
    CrossEntropy { z: Var, probs: Vec<T>, targets: Vec<Option<usize>>, factor: T },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Eager computation record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for the backward sweep. A graph is built per forward
/// pass and dropped after `backward`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor<impl Scalar>) -> (usize, usize) {
    t.dims2().unwrap_or((0, 0))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Var {
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some(format!("non-finite value produced by {name} (node {})", self.nodes.len()));
        }
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some(format!("non-finite input (node {})", self.nodes.len()));
        }
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_shared(Arc::new(t), false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.push_shared(t, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_shared(Arc::new(t), true)
    }

    pub fn param_shared(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.push_shared(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `Err(Numeric)` once any node has produced a NaN or infinity.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(msg) => Err(Error::Numeric(msg.clone())),
            None => Ok(()),
        }
    }

    /// Attention probabilities of an attention node, one `[q_len × k_len]`
    /// matrix per (segment, head), segment-major.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn mat(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::dim(format!("{what}: expected a matrix, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul lhs")?;
        let (k2, n) = self.mat(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: [{m}×{k}] · [{k2}×{n}]")));
        }
        let mut out = Tensor::zeros([m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }, ng, "matmul"))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt lhs")?;
        let (n, k2) = self.mat(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt: [{m}×{k}] · [{n}×{k2}]ᵀ")));
        }
        let mut out = Tensor::zeros([m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }, ng, "matmul_nt"))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip(a, b, |p, q| p + q);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip(a, b, |p, q| p - q);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng, "sub"))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip(a, b, |p, q| p * q);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng, "mul"))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(&[a]);
        self.push(out, Op::Silu(a), ng, "silu")
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last dimension restricted to `mask == true`; masked
    /// entries get probability exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::dim("masked_softmax: mask length differs from input"));
        }
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let width = *x.shape().last().ok_or_else(|| Error::dim("softmax of a scalar"))?;
        if width == 0 {
            return Err(Error::dim("softmax over an empty last dimension"));
        }
        let mut out = Tensor::zeros(x.shape().to_vec());
        for (r, (src, dst)) in x.data().chunks(width).zip(out.data_mut().chunks_mut(width)).enumerate() {
            let m = mask.map(|m| &m[r * width..(r + 1) * width]);
            softmax_row(src, dst, m);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Softmax(a), ng, "softmax"))
    }

    /// Row-wise RMS normalisation with a per-column gain `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.mat(x, "rms_norm")?;
        if self.value(w).numel() != c {
            return Err(Error::dim(format!("rms_norm: gain has {} entries for width {c}", self.value(w).numel())));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(c).unwrap();
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * wv[j];
            }
        }
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::new([r, c], out)?, Op::RmsNorm { x, w, inv_rms }, ng, "rms_norm"))
    }

    /// Interleaved-pair rotary embedding. Within every column block of width
    /// `block`, columns `[offset, offset + width)` are rotated pairwise, pair
    /// `p` of row `i` by angle `positions[i] · theta^(−2p/width)`.
    pub fn rope(
        &mut self,
        x: Var,
        positions: &[usize],
        theta: f64,
        block: usize,
        offset: usize,
        width: usize,
    ) -> Result<Var> {
        let (r, c) = self.mat(x, "rope")?;
        if width % 2 != 0 {
            return Err(Error::dim(format!("rope: odd rotary width {width}")));
        }
        if positions.len() != r {
            return Err(Error::dim(format!("rope: {} positions for {r} rows", positions.len())));
        }
        if block == 0 || c % block != 0 || offset + width > block {
            return Err(Error::dim(format!("rope: block {block}/offset {offset}/width {width} vs {c} columns")));
        }
        let (cos, sin) = rope_tables::<T>(positions, theta, width);
        let mut out = self.value(x).clone();
        rotate(out.data_mut(), c, &cos, &sin, block, offset, width, false);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Rope { x, cos, sin, block, offset, width }, ng, "rope"))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, ng, "slice_cols"))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, ng, "slice_rows"))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| dims(self.value(p)).0).ok_or_else(|| Error::dim("concat of nothing"))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.mat(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols: {r} rows vs {rows}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new([rows, total], out)?, Op::ConcatCols(parts.to_vec()), ng, "concat_cols"))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| dims(self.value(p)).1).ok_or_else(|| Error::dim("concat of nothing"))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.mat(p, "concat_rows")?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows: {c} cols vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new([rows, cols], out)?, Op::ConcatRows(parts.to_vec()), ng, "concat_rows"))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(table, "gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::contract(format!("token id {id} out of range for table of {r} rows")));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(Tensor::new([ids.len(), c], out)?, Op::Gather { table, ids: ids.to_vec() }, ng, "gather"))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_sq();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumSq(a), ng, "sum_sq")
    }

    /// Fused causal scaled-dot-product attention, see [`AttentionSpec`].
    pub fn attention(&mut self, q: Var, k: Var, k_shared: Option<Var>, v: Var, spec: AttentionSpec) -> Result<Var> {
        let s = &spec;
        if s.n_kv_heads == 0 || s.n_heads % s.n_kv_heads != 0 {
            return Err(Error::dim(format!("attention: {} heads over {} kv heads", s.n_heads, s.n_kv_heads)));
        }
        let dq = s.d_qk + s.d_rope;
        let (qr, qc) = self.mat(q, "attention q")?;
        let (kr, kc) = self.mat(k, "attention k")?;
        let (vr, vc) = self.mat(v, "attention v")?;
        if qc != s.n_heads * dq || kc != s.n_kv_heads * s.d_qk || vc != s.n_kv_heads * s.d_v || kr != vr {
            return Err(Error::dim(format!(
                "attention: q [{qr}×{qc}], k [{kr}×{kc}], v [{vr}×{vc}] do not fit the head layout"
            )));
        }
        match k_shared {
            Some(ks) => {
                let (sr, sc) = self.mat(ks, "attention shared key")?;
                if sr != kr || sc != s.d_rope {
                    return Err(Error::dim("attention: shared key shape"));
                }
            }
            None if s.d_rope > 0 => return Err(Error::dim("attention: d_rope > 0 needs a shared key")),
            None => {}
        }
        if s.q_pos.len() != qr || s.k_pos.len() != kr {
            return Err(Error::dim("attention: position arrays do not match row counts"));
        }
        for seg in &s.segments {
            if seg.q_start + seg.q_len > qr || seg.k_start + seg.k_len > kr {
                return Err(Error::dim("attention: segment out of range"));
            }
        }
        let group = s.n_heads / s.n_kv_heads;
        let scale = T::from_f64_lossy(s.scale);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let ksd = k_shared.map(|ks| self.value(ks).data());
        let wo = s.n_heads * s.d_v;
        let mut out = vec![T::zero(); qr * wo];
        let mut probs = Vec::with_capacity(s.segments.len() * s.n_heads);
        for seg in &s.segments {
            let mask: Vec<bool> = (0..seg.q_len)
                .flat_map(|i| (0..seg.k_len).map(move |j| (i, j)))
                .map(|(i, j)| s.visible(s.q_pos[seg.q_start + i], s.k_pos[seg.k_start + j]))
                .collect();
            for h in 0..s.n_heads {
                let g = h / group;
                let mut sc = vec![T::zero(); seg.q_len * seg.k_len];
                T::gemm(
                    seg.q_len,
                    s.d_qk,
                    seg.k_len,
                    scale,
                    &qd[seg.q_start * qc + h * dq..],
                    qc as isize,
                    1,
                    &kd[seg.k_start * kc + g * s.d_qk..],
                    1,
                    kc as isize,
                    T::zero(),
                    &mut sc,
                    seg.k_len as isize,
                    1,
                );
                if let Some(ksd) = ksd {
                    T::gemm(
                        seg.q_len,
                        s.d_rope,
                        seg.k_len,
                        scale,
                        &qd[seg.q_start * qc + h * dq + s.d_qk..],
                        qc as isize,
                        1,
                        &ksd[seg.k_start * s.d_rope..],
                        1,
                        s.d_rope as isize,
                        T::one(),
                        &mut sc,
                        seg.k_len as isize,
                        1,
                    );
                }
                let mut p = vec![T::zero(); sc.len()];
                if seg.k_len > 0 {
                    for ((src, dst), m) in sc
                        .chunks(seg.k_len)
                        .zip(p.chunks_mut(seg.k_len))
                        .zip(mask.chunks(seg.k_len))
                    {
                        softmax_row(src, dst, Some(m));
                    }
                }
                T::gemm(
                    seg.q_len,
                    seg.k_len,
                    s.d_v,
                    T::one(),
                    &p,
                    seg.k_len as isize,
                    1,
                    &vd[seg.k_start * vc + g * s.d_v..],
                    vc as isize,
                    1,
                    T::zero(),
                    &mut out[seg.q_start * wo + h * s.d_v..],
                    wo as isize,
                    1,
                );
                probs.push(Tensor::new([seg.q_len, seg.k_len], p)?);
            }
        }
        let mut inputs = vec![q, k, v];
        inputs.extend(k_shared);
        let ng = self.ng(&inputs);
        let out = Tensor::new([qr, wo], out)?;
        Ok(self.push(out, Op::Attention { q, k, k_shared, v, spec: Box::new(spec), probs }, ng, "attention"))
    }

    /// Temperature-scaled distillation loss
    /// `factor · Σ_rows KL(softmax(teacher/τ) ‖ softmax(z/τ))` over rows with
    /// `rows[i] == true`. Gradients flow only into `z`.
    pub fn kd_div(&mut self, z: Var, teacher: &Tensor<T>, tau: f64, rows: &[bool], factor: f64) -> Result<Var> {
        let (r, c) = self.mat(z, "kd_div")?;
        if teacher.dims2()? != (r, c) {
            return Err(Error::dim(format!("kd_div: student [{r}×{c}] vs teacher {:?}", teacher.shape())));
        }
        if rows.len() != r {
            return Err(Error::dim("kd_div: row mask length"));
        }
        let inv_tau = T::from_f64_lossy(1.0 / tau);
        let mut p_t = vec![T::zero(); r * c];
        let mut p_s = vec![T::zero(); r * c];
        let mut total = T::zero();
        let zs = self.value(z).data();
        for i in 0..r {
            if !rows[i] {
                continue;
            }
            let lt = log_softmax_scaled(&teacher.data()[i * c..(i + 1) * c], inv_tau);
            let ls = log_softmax_scaled(&zs[i * c..(i + 1) * c], inv_tau);
            let mut kl = T::zero();
            for j in 0..c {
                let pt = lt[j].exp();
                p_t[i * c + j] = pt;
                p_s[i * c + j] = ls[j].exp();
                if pt > T::zero() {
                    kl += pt * (lt[j] - ls[j]);
                }
            }
            total += kl;
        }
        let factor = T::from_f64_lossy(factor);
        let ng = self.ng(&[z]);
        let op = Op::Kd { z, p_teacher: p_t, p_student: p_s, rows: rows.to_vec(), factor: factor * inv_tau };
        Ok(self.push(Tensor::scalar(total * factor), op, ng, "kd_div"))
    }

    /// `factor · Σ_rows (1 − cos(a_i, target_i))` over rows with
    /// `rows[i] == true`; the norm product is guarded by 1e-12.
    pub fn cosine_distance(&mut self, a: Var, target: &Tensor<T>, rows: &[bool], factor: f64) -> Result<Var> {
        let (r, c) = self.mat(a, "cosine_distance")?;
        if target.dims2()? != (r, c) || rows.len() != r {
            return Err(Error::dim("cosine_distance: shape mismatch"));
        }
        let av = self.value(a).data();
        let mut total = T::zero();
        for i in 0..r {
            if rows[i] {
                let (_, _, cos) = cos_parts(&av[i * c..(i + 1) * c], target.row(i));
                total += T::one() - cos;
            }
        }
        let factor = T::from_f64_lossy(factor);
        let ng = self.ng(&[a]);
        let op = Op::Cosine { a, target: target.clone(), rows: rows.to_vec(), factor };
        Ok(self.push(Tensor::scalar(total * factor), op, ng, "cosine"))
    }

    /// `factor · Σ_rows −log softmax(z_i)[target_i]` over rows with a target.
    pub fn cross_entropy(&mut self, z: Var, targets: &[Option<usize>], factor: f64) -> Result<Var> {
        let (r, c) = self.mat(z, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::dim("cross_entropy: one target per row"));
        }
        let zs = self.value(z).data();
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(Error::contract(format!("target {t} out of range for {c} classes")));
            }
            let ls = log_softmax_scaled(&zs[i * c..(i + 1) * c], T::one());
            total -= ls[t];
            for j in 0..c {
                probs[i * c + j] = ls[j].exp();
            }
        }
        let factor = T::from_f64_lossy(factor);
        let ng = self.ng(&[z]);
        let op = Op::CrossEntropy { z, probs, targets: targets.to_vec(), factor };
        Ok(self.push(Tensor::scalar(total * factor), op, ng, "cross_entropy"))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        self.check()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims(val(*a));
                let n = dims(y).1;
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if want(*a) {
                    // dA = dC · Bᵀ, or dC · B when C = A·Bᵀ
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    let ga = slot(grads, *a, m * k);
                    T::gemm(m, n, k, T::one(), gy, n as isize, 1, bd, rsb, csb, T::one(), ga, k as isize, 1);
                }
                if want(*b) {
                    let gb = slot(grads, *b, k * n);
                    if *trans_b {
                        // B is [n×k]: dB = dCᵀ · A
                        T::gemm(n, m, k, T::one(), gy, 1, n as isize, ad, k as isize, 1, T::one(), gb, k as isize, 1);
                    } else {
                        // dB = Aᵀ · dC
                        T::gemm(k, m, n, T::one(), ad, 1, k as isize, gy, n as isize, 1, T::one(), gb, n as isize, 1);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        axpy(slot(grads, v, gy.len()), gy, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    axpy(slot(grads, *a, gy.len()), gy, T::one());
                }
                if want(*b) {
                    axpy(slot(grads, *b, gy.len()), gy, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bd = val(*b).data();
                    for ((g, &d), &o) in slot(grads, *a, gy.len()).iter_mut().zip(gy).zip(bd) {
                        *g += d * o;
                    }
                }
                if want(*b) {
                    let ad = val(*a).data();
                    for ((g, &d), &o) in slot(grads, *b, gy.len()).iter_mut().zip(gy).zip(ad) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    axpy(slot(grads, *a, gy.len()), gy, *c);
                }
            }
            Op::Sigmoid(a) => {
                if want(*a) {
                    for ((g, &d), &s) in slot(grads, *a, gy.len()).iter_mut().zip(gy).zip(y.data()) {
                        *g += d * s * (T::one() - s);
                    }
                }
            }
            Op::Silu(a) => {
                if want(*a) {
                    let xd = val(*a).data();
                    for ((g, &d), &x) in slot(grads, *a, gy.len()).iter_mut().zip(gy).zip(xd) {
                        let s = sigmoid(x);
                        *g += d * (s + x * s * (T::one() - s));
                    }
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    let w = *y.shape().last().unwrap();
                    let ga = slot(grads, *a, gy.len());
                    for ((g, dy), p) in ga.chunks_mut(w).zip(gy.chunks(w)).zip(y.data().chunks(w)) {
                        softmax_backward_row(g, dy, p);
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (r, c) = dims(y);
                let (xd, wd) = (val(*x).data(), val(*w).data());
                if want(*w) {
                    let gw = slot(grads, *w, c);
                    for i in 0..r {
                        for j in 0..c {
                            gw[j] += gy[i * c + j] * xd[i * c + j] * inv_rms[i];
                        }
                    }
                }
                if want(*x) {
                    let n = T::from_usize(c).unwrap();
                    let gx = slot(grads, *x, r * c);
                    for i in 0..r {
                        let inv = inv_rms[i];
                        let row = i * c..(i + 1) * c;
                        let dot: T = gy[row.clone()]
                            .iter()
                            .zip(&wd[..c])
                            .zip(&xd[row.clone()])
                            .map(|((&d, &wj), &xj)| d * wj * xj)
                            .sum();
                        let k = inv * inv * inv * dot / n;
                        for j in 0..c {
                            gx[i * c + j] += inv * gy[i * c + j] * wd[j] - k * xd[i * c + j];
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin, block, offset, width } => {
                if want(*x) {
                    let c = dims(y).1;
                    let mut back = gy.to_vec();
                    rotate(&mut back, c, cos, sin, *block, *offset, *width, true);
                    axpy(slot(grads, *x, gy.len()), &back, T::one());
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let (r, len) = dims(y);
                    let c = dims(val(*x)).1;
                    let gx = slot(grads, *x, r * c);
                    for i in 0..r {
                        axpy(&mut gx[i * c + start..i * c + start + len], &gy[i * len..(i + 1) * len], T::one());
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if want(*x) {
                    let c = dims(y).1;
                    let n = val(*x).numel();
                    let gx = slot(grads, *x, n);
                    axpy(&mut gx[start * c..start * c + gy.len()], gy, T::one());
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims(y);
                let mut off = 0;
                for &p in parts {
                    let c = dims(val(p)).1;
                    if want(p) {
                        let gp = slot(grads, p, r * c);
                        for i in 0..r {
                            axpy(&mut gp[i * c..(i + 1) * c], &gy[i * total + off..i * total + off + c], T::one());
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if want(p) {
                        axpy(slot(grads, p, n), &gy[off..off + n], T::one());
                    }
                    off += n;
                }
            }
            Op::Gather { table, ids } => {
                if want(*table) {
                    let c = dims(y).1;
                    let gt = slot(grads, *table, val(*table).numel());
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * c..(id + 1) * c], &gy[i * c..(i + 1) * c], T::one());
                    }
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let n = val(*a).numel();
                    for g in slot(grads, *a, n) {
                        *g += gy[0];
                    }
                }
            }
            Op::SumSq(a) => {
                if want(*a) {
                    let ad = val(*a).data();
                    let two = T::one() + T::one();
                    for (g, &x) in slot(grads, *a, ad.len()).iter_mut().zip(ad) {
                        *g += two * x * gy[0];
                    }
                }
            }
            Op::Attention { q, k, k_shared, v, spec, probs } => {
                self.attention_backward(gy, *q, *k, *k_shared, *v, spec, probs, grads);
            }
            Op::Kd { z, p_teacher, p_student, rows, factor } => {
                if want(*z) {
                    let c = dims(val(*z)).1;
                    let gz = slot(grads, *z, val(*z).numel());
                    let f = *factor * gy[0];
                    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                        for j in i * c..(i + 1) * c {
                            gz[j] += f * (p_student[j] - p_teacher[j]);
                        }
                    }
                }
            }
            Op::Cosine { a, target, rows, factor } => {
                if want(*a) {
                    let c = dims(val(*a)).1;
                    let ad = val(*a).data();
                    let ga = slot(grads, *a, ad.len());
                    let f = *factor * gy[0];
                    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                        let ar = &ad[i * c..(i + 1) * c];
                        let br = target.row(i);
                        let (coef_a, denom, _) = cos_parts(ar, br);
                        for j in 0..c {
                            ga[i * c + j] += f * (coef_a * ar[j] - br[j] / denom);
                        }
                    }
                }
            }
            Op::CrossEntropy { z, probs, targets, factor } => {
                if want(*z) {
                    let c = dims(val(*z)).1;
                    let gz = slot(grads, *z, val(*z).numel());
                    let f = *factor * gy[0];
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            gz[i * c + j] += f * probs[i * c + j];
                        }
                        gz[i * c + t] -= f;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gy: &[T],
        q: Var,
        k: Var,
        k_shared: Option<Var>,
        v: Var,
        s: &AttentionSpec,
        probs: &[Tensor<T>],
        grads: &mut [Option<Vec<T>>],
    ) {
        let want = |x: Var| self.nodes[x.0].needs_grad;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let ksd = k_shared.map(|x| self.value(x).data());
        let dq = s.d_qk + s.d_rope;
        let (qc, kc, vc) = (s.n_heads * dq, s.n_kv_heads * s.d_qk, s.n_kv_heads * s.d_v);
        let wo = s.n_heads * s.d_v;
        let group = s.n_heads / s.n_kv_heads;
        let scale = T::from_f64_lossy(s.scale);
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut gks = vec![T::zero(); ksd.map_or(0, <[T]>::len)];
        let mut pi = 0;
        for seg in &s.segments {
            let (tq, tk) = (seg.q_len, seg.k_len);
            for h in 0..s.n_heads {
                let g = h / group;
                let p = probs[pi].data();
                pi += 1;
                if tq == 0 || tk == 0 {
                    continue;
                }
                let go = &gy[seg.q_start * wo + h * s.d_v..];
                // dP = dO · Vᵀ
                let mut dp = vec![T::zero(); tq * tk];
                T::gemm(tq, s.d_v, tk, T::one(), go, wo as isize, 1, &vd[seg.k_start * vc + g * s.d_v..], 1, vc as isize, T::zero(), &mut dp, tk as isize, 1);
                // dV += Pᵀ · dO
                T::gemm(tk, tq, s.d_v, T::one(), p, 1, tk as isize, go, wo as isize, 1, T::one(), &mut gv[seg.k_start * vc + g * s.d_v..], vc as isize, 1);
                let mut ds = vec![T::zero(); tq * tk];
                for ((dst, dpr), pr) in ds.chunks_mut(tk).zip(dp.chunks(tk)).zip(p.chunks(tk)) {
                    softmax_backward_row(dst, dpr, pr);
                }
                let q_off = seg.q_start * qc + h * dq;
                let k_off = seg.k_start * kc + g * s.d_qk;
                // dQ_nope += scale · dS · K
                T::gemm(tq, tk, s.d_qk, scale, &ds, tk as isize, 1, &kd[k_off..], kc as isize, 1, T::one(), &mut gq[q_off..], qc as isize, 1);
                // dK += scale · dSᵀ · Q_nope
                T::gemm(tk, tq, s.d_qk, scale, &ds, 1, tk as isize, &qd[q_off..], qc as isize, 1, T::one(), &mut gk[k_off..], kc as isize, 1);
                if let Some(ksd) = ksd {
                    let r = s.d_rope;
                    T::gemm(tq, tk, r, scale, &ds, tk as isize, 1, &ksd[seg.k_start * r..], r as isize, 1, T::one(), &mut gq[q_off + s.d_qk..], qc as isize, 1);
                    T::gemm(tk, tq, r, scale, &ds, 1, tk as isize, &qd[q_off + s.d_qk..], qc as isize, 1, T::one(), &mut gks[seg.k_start * r..], r as isize, 1);
                }
            }
        }
        let mut flush = |x: Var, buf: &[T]| {
            if want(x) {
                axpy(slot(grads, x, buf.len()), buf, T::one());
            }
        };
        flush(q, &gq);
        flush(k, &gk);
        flush(v, &gv);
        if let Some(ks) = k_shared {
            flush(ks, &gks);
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T], mask: Option<&[bool]>) {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in src.iter().enumerate() {
        if on(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        dst.fill(T::zero());
        return;
    }
    let mut total = T::zero();
    for (j, (d, &x)) in dst.iter_mut().zip(src).enumerate() {
        *d = if on(j) { (x - max).exp() } else { T::zero() };
        total += *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

fn softmax_backward_row<T: Scalar>(g: &mut [T], dy: &[T], p: &[T]) {
    let dot: T = dy.iter().zip(p).map(|(&d, &q)| d * q).sum();
    for ((g, &d), &q) in g.iter_mut().zip(dy).zip(p) {
        *g += q * (d - dot);
    }
}

fn log_softmax_scaled<T: Scalar>(z: &[T], s: T) -> Vec<T> {
    let max = z.iter().map(|&x| x * s).fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&x| (x * s - max).exp()).sum::<T>().ln() + max;
    z.iter().map(|&x| x * s - lse).collect()
}

/// `(coef_a, D, cos)` with `D = max(√(‖a‖²‖b‖²), 1e-12)` and
/// `∂cos/∂a = b/D − coef_a·a`. Taking one square root of the product keeps
/// parallel and anti-parallel rows at exactly ±1.
fn cos_parts<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let sa: T = a.iter().map(|&x| x * x).sum();
    let sb: T = b.iter().map(|&x| x * x).sum();
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let raw = (sa * sb).sqrt();
    let guard = T::from_f64_lossy(1e-12);
    let (denom, guarded) = if raw > guard { (raw, false) } else { (guard, true) };
    let cos = (dot / denom).max(-T::one()).min(T::one());
    let coef_a = if guarded { T::zero() } else { cos / sa };
    (coef_a, denom, cos)
}

fn rope_tables<T: Scalar>(positions: &[usize], theta: f64, width: usize) -> (Vec<T>, Vec<T>) {
    let pairs = width / 2;
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for &pos in positions {
        for p in 0..pairs {
            let freq = theta.powf(-2.0 * p as f64 / width as f64);
            let angle = pos as f64 * freq;
            cos.push(T::from_f64_lossy(angle.cos()));
            sin.push(T::from_f64_lossy(angle.sin()));
        }
    }
    (cos, sin)
}

#[allow(clippy::too_many_arguments)]
fn rotate<T: Scalar>(data: &mut [T], cols: usize, cos: &[T], sin: &[T], block: usize, offset: usize, width: usize, inverse: bool) {
    let pairs = width / 2;
    if pairs == 0 {
        return;
    }
    for (i, row) in data.chunks_mut(cols).enumerate() {
        let (c, s) = (&cos[i * pairs..(i + 1) * pairs], &sin[i * pairs..(i + 1) * pairs]);
        for b in (0..cols).step_by(block) {
            for p in 0..pairs {
                let j = b + offset + 2 * p;
                let (x0, x1) = (row[j], row[j + 1]);
                let sn = if inverse { -s[p] } else { s[p] };
                row[j] = x0 * c[p] - x1 * sn;
                row[j + 1] = x0 * sn + x1 * c[p];
            }
        }
    }
}

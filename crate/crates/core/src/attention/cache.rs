use super::{AttentionConfig, Variant};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Growing per-layer K/V arrays (GQA and full-attention GateSWA layers).
/// Keys are stored after RoPE.
#[derive(Debug, Clone)]
pub struct FullCache<T> {
    width: usize,
    k: Vec<T>,
    v: Vec<T>,
    len: usize,
    reads: u64,
}

/// MLA latent cache: `c^KV` rows of width `d_c` plus the shared rotary key
/// rows of width `d_r` (after RoPE).
#[derive(Debug, Clone)]
pub struct LatentCache<T> {
    d_c: usize,
    d_r: usize,
    c: Vec<T>,
    k_rope: Vec<T>,
    len: usize,
    reads: u64,
}

/// Circular buffer of the last `window` K/V rows plus the absolute position
/// counter.
#[derive(Debug, Clone)]
pub struct RollingCache<T> {
    window: usize,
    width: usize,
    k: Vec<T>,
    v: Vec<T>,
    pos: Vec<usize>,
    seen: usize,
    reads: u64,
}

/// Decode-time state of one attention layer. Owned by a single decode stream.
#[derive(Debug, Clone)]
pub enum KvCache<T> {
    Full(FullCache<T>),
    Latent(LatentCache<T>),
    Rolling(RollingCache<T>),
}

impl<T: Scalar> KvCache<T> {
    pub fn for_config(cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let kv = cfg.n_kv_heads * cfg.head_dim;
        Ok(match cfg.variant {
            Variant::Gqa | Variant::SwaFull => {
                KvCache::Full(FullCache { width: kv, k: Vec::new(), v: Vec::new(), len: 0, reads: 0 })
            }
            Variant::Mla => {
                let m = cfg.mla_config()?;
                KvCache::Latent(LatentCache { d_c: m.d_c, d_r: m.d_r, c: Vec::new(), k_rope: Vec::new(), len: 0, reads: 0 })
            }
            Variant::SwaLocal => {
                let w = cfg.window.unwrap_or(1);
                KvCache::Rolling(RollingCache {
                    window: w,
                    width: kv,
                    k: vec![T::zero(); w * kv],
                    v: vec![T::zero(); w * kv],
                    pos: vec![0; w],
                    seen: 0,
                    reads: 0,
                })
            }
        })
    }

    /// Tokens that have passed through this cache; the next position.
    pub fn len(&self) -> usize {
        match self {
            KvCache::Full(c) => c.len,
            KvCache::Latent(c) => c.len,
            KvCache::Rolling(c) => c.seen,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floats currently held.
    pub fn stored_floats(&self) -> usize {
        match self {
            KvCache::Full(c) => c.k.len() + c.v.len(),
            KvCache::Latent(c) => c.c.len() + c.k_rope.len(),
            KvCache::Rolling(c) => 2 * c.width * c.stored(),
        }
    }

    /// Floats read out of the cache by attention so far.
    pub fn reads(&self) -> u64 {
        match self {
            KvCache::Full(c) => c.reads,
            KvCache::Latent(c) => c.reads,
            KvCache::Rolling(c) => c.reads,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            KvCache::Full(_) => "full",
            KvCache::Latent(_) => "latent",
            KvCache::Rolling(_) => "rolling",
        }
    }
}

impl<T: Scalar> FullCache<T> {
    /// Cached keys, values and their positions; counts the read.
    pub(crate) fn read(&mut self) -> (Tensor<T>, Tensor<T>, Vec<usize>) {
        self.reads += (self.k.len() + self.v.len()) as u64;
        (
            Tensor::new([self.len, self.width], self.k.clone()).expect("cache shape"),
            Tensor::new([self.len, self.width], self.v.clone()).expect("cache shape"),
            (0..self.len).collect(),
        )
    }

    pub(crate) fn append(&mut self, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        if k.cols() != self.width || v.cols() != self.width || k.rows() != v.rows() {
            return Err(Error::dim("full cache append: width mismatch"));
        }
        self.k.extend_from_slice(k.data());
        self.v.extend_from_slice(v.data());
        self.len += k.rows();
        Ok(())
    }
}

impl<T: Scalar> LatentCache<T> {
    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn d_r(&self) -> usize {
        self.d_r
    }

    pub fn tokens(&self) -> usize {
        self.len
    }

    pub(crate) fn read(&mut self) -> (Tensor<T>, Tensor<T>) {
        self.reads += (self.c.len() + self.k_rope.len()) as u64;
        (
            Tensor::new([self.len, self.d_c], self.c.clone()).expect("cache shape"),
            Tensor::new([self.len, self.d_r], self.k_rope.clone()).expect("cache shape"),
        )
    }

    /// Borrowing read for the absorbed decode path.
    pub(crate) fn read_slices(&mut self) -> (&[T], &[T], usize) {
        self.reads += (self.c.len() + self.k_rope.len()) as u64;
        (&self.c, &self.k_rope, self.len)
    }

    pub(crate) fn append(&mut self, c: &Tensor<T>, k_rope: &Tensor<T>) -> Result<()> {
        if c.cols() != self.d_c || (self.d_r > 0 && k_rope.cols() != self.d_r) || c.rows() != k_rope.rows() {
            return Err(Error::dim("latent cache append: width mismatch"));
        }
        self.c.extend_from_slice(c.data());
        self.k_rope.extend_from_slice(k_rope.data());
        self.len += c.rows();
        Ok(())
    }
}

impl<T: Scalar> RollingCache<T> {
    pub fn window(&self) -> usize {
        self.window
    }

    fn stored(&self) -> usize {
        self.seen.min(self.window)
    }

    /// Live entries in chronological order.
    pub(crate) fn read(&mut self) -> (Tensor<T>, Tensor<T>, Vec<usize>) {
        let n = self.stored();
        self.reads += (2 * n * self.width) as u64;
        let (mut k, mut v, mut pos) = (Vec::with_capacity(n * self.width), Vec::with_capacity(n * self.width), Vec::with_capacity(n));
        for abs in self.seen - n..self.seen {
            let slot = abs % self.window;
            k.extend_from_slice(&self.k[slot * self.width..(slot + 1) * self.width]);
            v.extend_from_slice(&self.v[slot * self.width..(slot + 1) * self.width]);
            pos.push(self.pos[slot]);
        }
        (
            Tensor::new([n, self.width], k).expect("cache shape"),
            Tensor::new([n, self.width], v).expect("cache shape"),
            pos,
        )
    }

    pub(crate) fn append(&mut self, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        if k.cols() != self.width || v.cols() != self.width || k.rows() != v.rows() {
            return Err(Error::dim("rolling cache append: width mismatch"));
        }
        for r in 0..k.rows() {
            let slot = self.seen % self.window;
            self.k[slot * self.width..(slot + 1) * self.width].copy_from_slice(k.row(r));
            self.v[slot * self.width..(slot + 1) * self.width].copy_from_slice(v.row(r));
            self.pos[slot] = self.seen;
            self.seen += 1;
        }
        Ok(())
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use super::{init_params, ModelSpec};
use crate::attention::{attention_forward, AttentionState, AttentionWeights, KvCache};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Graph handles of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    /// Residual stream entering the layer.
    pub h_in: Var,
    pub attn: AttentionState,
    /// FFN branch output, before its residual add.
    pub ffn: Var,
    pub h_out: Var,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub logits: Var,
    pub layers: Vec<LayerVars>,
    /// Trainable parameters bound into the graph, by name.
    pub params: Vec<(String, Var)>,
}

/// Value snapshot of one layer's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTap<T> {
    pub h_in: Tensor<T>,
    /// Attention branch output after `o_proj`, before the residual add.
    pub u: Tensor<T>,
    pub ffn: Tensor<T>,
    pub h_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap<T> {
    pub logits: Tensor<T>,
    pub layers: BTreeMap<usize, LayerTap<T>>,
}

/// A decoder: spec plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

type Trainable<'a> = &'a dyn Fn(&str) -> bool;

fn frozen(_: &str) -> bool {
    false
}

/// Turns parameter names into graph nodes and records the trainable ones.
struct Binder<'a> {
    trainable: Trainable<'a>,
    /// Externally created nodes that stand in for stored tensors.
    vars: Option<&'a BTreeMap<String, Var>>,
    bound: Vec<(String, Var)>,
}

impl<T: Scalar> Model<T> {
    /// Checks that `params` holds exactly the spec's tensors with the right
    /// shapes.
    pub fn new(spec: ModelSpec, params: ParamStore<T>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        for (name, shape) in &shapes {
            let t = params.require(name)?;
            if t.shape() != shape {
                return Err(Error::dim(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        if params.len() != shapes.len() {
            let known: Vec<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = params.names().filter(|n| !known.contains(n)).collect();
            return Err(Error::contract(format!("unexpected parameters {extra:?}")));
        }
        Ok(Self { spec, params })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Self::new(spec, params)
    }

    fn bind(&self, g: &mut Graph<T>, name: &str, b: &mut Binder<'_>) -> Result<Var> {
        if let Some(&v) = b.vars.and_then(|m| m.get(name)) {
            if g.shape(v) != self.params.require(name)?.shape() {
                return Err(Error::dim(format!("{name}: bound node has shape {:?}", g.shape(v))));
            }
            b.bound.push((name.to_string(), v));
            return Ok(v);
        }
        let t = self.params.shared(name)?;
        Ok(if (b.trainable)(name) {
            let v = g.param_shared(t);
            b.bound.push((name.to_string(), v));
            v
        } else {
            g.constant_shared(t)
        })
    }

    fn ids(&self, seqs: &[&[u32]]) -> Result<Vec<usize>> {
        let v = self.spec.vocab;
        seqs.iter()
            .flat_map(|s| s.iter())
            .map(|&t| {
                if (t as usize) < v {
                    Ok(t as usize)
                } else {
                    Err(Error::contract(format!("token {t} outside vocab {v}")))
                }
            })
            .collect()
    }

    /// The attention branch of layer `i` (pre-norm + attention) applied to
    /// residual-stream rows `h_in`.
    pub fn attention_branch(
        &self,
        g: &mut Graph<T>,
        i: usize,
        h_in: Var,
        lens: &[usize],
        cache: Option<&mut KvCache<T>>,
        trainable: Trainable<'_>,
        bound: &mut Vec<(String, Var)>,
    ) -> Result<AttentionState> {
        let mut b = Binder { trainable, vars: None, bound: std::mem::take(bound) };
        let st = self.attention_branch_with(g, i, h_in, lens, cache, &mut b);
        *bound = b.bound;
        st
    }

    fn attention_branch_with(
        &self,
        g: &mut Graph<T>,
        i: usize,
        h_in: Var,
        lens: &[usize],
        cache: Option<&mut KvCache<T>>,
        b: &mut Binder<'_>,
    ) -> Result<AttentionState> {
        let cfg = self.spec.layers.get(i).ok_or_else(|| Error::contract(format!("layer {i} out of range")))?;
        let norm = self.bind(g, &format!("layers.{i}.attn_norm.weight"), b)?;
        let x = g.rms_norm(h_in, norm, self.spec.norm_eps)?;
        let w = AttentionWeights::from_fn(cfg, |suffix| self.bind(g, &format!("layers.{i}.attn.{suffix}"), b))?;
        attention_forward(g, cfg, &w, x, lens, cache)
    }

    fn layer(
        &self,
        g: &mut Graph<T>,
        i: usize,
        h_in: Var,
        lens: &[usize],
        cache: Option<&mut KvCache<T>>,
        b: &mut Binder<'_>,
    ) -> Result<LayerVars> {
        let attn = self.attention_branch_with(g, i, h_in, lens, cache, b)?;
        let h1 = g.add(h_in, attn.u)?;
        let p = format!("layers.{i}.");
        let norm = self.bind(g, &format!("{p}ffn_norm.weight"), b)?;
        let y = g.rms_norm(h1, norm, self.spec.norm_eps)?;
        let wg = self.bind(g, &format!("{p}mlp.gate_proj"), b)?;
        let wu = self.bind(g, &format!("{p}mlp.up_proj"), b)?;
        let wd = self.bind(g, &format!("{p}mlp.down_proj"), b)?;
        let a = g.matmul(y, wg)?;
        let a = g.silu(a);
        let b = g.matmul(y, wu)?;
        let ab = g.mul(a, b)?;
        let ffn = g.matmul(ab, wd)?;
        let h_out = g.add(h1, ffn)?;
        Ok(LayerVars { h_in, attn, ffn, h_out })
    }

    fn stack(
        &self,
        g: &mut Graph<T>,
        ids: &[usize],
        lens: &[usize],
        mut caches: Option<&mut [KvCache<T>]>,
        mut b: Binder<'_>,
    ) -> Result<ModelGraph> {
        let embed = self.bind(g, "embed.weight", &mut b)?;
        let mut h = g.gather_rows(embed, ids)?;
        let mut layers = Vec::with_capacity(self.spec.n_layers);
        for i in 0..self.spec.n_layers {
            let cache = caches.as_deref_mut().map(|c| &mut c[i]);
            let lv = self.layer(g, i, h, lens, cache, &mut b)?;
            h = lv.h_out;
            layers.push(lv);
        }
        let norm = self.bind(g, "final_norm.weight", &mut b)?;
        let hn = g.rms_norm(h, norm, self.spec.norm_eps)?;
        let head = self.bind(g, "lm_head.weight", &mut b)?;
        let logits = g.matmul(hn, head)?;
        Ok(ModelGraph { logits, layers, params: b.bound })
    }

    /// Records the forward pass of a batch of sequences (stacked by rows);
    /// parameters with `trainable(name)` become gradient leaves.
    pub fn build(&self, g: &mut Graph<T>, seqs: &[&[u32]], trainable: Trainable<'_>) -> Result<ModelGraph> {
        let ids = self.ids(seqs)?;
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        self.stack(g, &ids, &lens, None, Binder { trainable, vars: None, bound: Vec::new() })
    }

    /// Like [`Model::build`] with every name in `vars` bound to the given
    /// node instead of the stored tensor; all other parameters are frozen.
    pub fn build_with_vars(&self, g: &mut Graph<T>, seqs: &[&[u32]], vars: &BTreeMap<String, Var>) -> Result<ModelGraph> {
        if let Some(name) = vars.keys().find(|n| !self.params.contains(n)) {
            return Err(Error::contract(format!("no parameter named {name}")));
        }
        let ids = self.ids(seqs)?;
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        self.stack(g, &ids, &lens, None, Binder { trainable: &frozen, vars: Some(vars), bound: Vec::new() })
    }

    pub fn logits(&self, seqs: &[&[u32]]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mg = self.build(&mut g, seqs, &frozen)?;
        g.check()?;
        Ok(g.value(mg.logits).clone())
    }

    pub fn new_caches(&self) -> Result<Vec<KvCache<T>>> {
        self.spec.layers.iter().map(KvCache::for_config).collect()
    }

    /// Feeds `tokens` as the continuation of the stream held in `caches`;
    /// returns their logits rows.
    pub fn decode(&self, tokens: &[u32], caches: &mut [KvCache<T>]) -> Result<Tensor<T>> {
        if caches.len() != self.spec.n_layers {
            return Err(Error::contract(format!("{} caches for {} layers", caches.len(), self.spec.n_layers)));
        }
        let ids = self.ids(&[tokens])?;
        let mut g = Graph::new();
        let mg = self.stack(&mut g, &ids, &[tokens.len()], Some(caches), Binder { trainable: &frozen, vars: None, bound: Vec::new() })?;
        g.check()?;
        Ok(g.value(mg.logits).clone())
    }

    /// Greedy continuation of `prompt` by `n` tokens through the caches.
    pub fn greedy(&self, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::contract("greedy decoding needs a non-empty prompt"));
        }
        let mut caches = self.new_caches()?;
        let mut logits = self.decode(prompt, &mut caches)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let next = argmax(logits.row(logits.rows() - 1)) as u32;
            out.push(next);
            logits = self.decode(&[next], &mut caches)?;
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { spec: self.spec.clone(), params: self.params.cast() }
    }

    /// Writes `spec.json`, `manifest.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("spec.json"), self.spec.to_json()?)?;
        self.params.save(dir, "manifest.json", "params.bin")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec = ModelSpec::from_json(&std::fs::read_to_string(dir.join("spec.json"))?)?;
        let params = ParamStore::load(dir, "manifest.json", "params.bin")?;
        Self::new(spec, params)
    }
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Frozen forward pass returning logits and value snapshots of the
/// requested layers.
pub fn forward_with_taps<T: Scalar>(model: &Model<T>, seqs: &[&[u32]], tap_layers: &[usize]) -> Result<ActivationTap<T>> {
    if let Some(&l) = tap_layers.iter().find(|&&l| l >= model.spec.n_layers) {
        return Err(Error::contract(format!("tap layer {l} out of range for {} layers", model.spec.n_layers)));
    }
    let mut g = Graph::new();
    let mg = model.build(&mut g, seqs, &frozen)?;
    g.check()?;
    let layers = tap_layers
        .iter()
        .map(|&l| {
            let lv = &mg.layers[l];
            let snap = |v: Var| g.value(v).clone();
            (l, LayerTap { h_in: snap(lv.h_in), u: snap(lv.attn.u), ffn: snap(lv.ffn), h_out: snap(lv.h_out) })
        })
        .collect();
    Ok(ActivationTap { logits: g.value(mg.logits).clone(), layers })
}

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_schedule, ModelSpec};
use crate::attention::{MlaConfig, Variant};
use crate::tensor::{fnv1a, ParamStore, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// `U(±gain·√(3/fan_in))`, i.e. std `gain/√fan_in`.
    FanInUniform,
    /// `N(0, gain²)`.
    Normal,
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    pub gain: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self { kind: InitKind::FanInUniform, gain: 1.0 }
    }
}

impl InitScheme {
    pub fn from_name(name: &str, gain: f64) -> Result<Self> {
        let kind = match name {
            "fan_in_uniform" => InitKind::FanInUniform,
            "normal" => InitKind::Normal,
            "zeros" => InitKind::Zeros,
            other => return Err(Error::config(format!("unknown init scheme {other:?}"))),
        };
        if !(gain.is_finite() && gain >= 0.0) {
            return Err(Error::config(format!("init gain {gain} must be finite and non-negative")));
        }
        Ok(Self { kind, gain })
    }

    /// Nominal standard deviation for a matrix with `fan_in` rows.
    pub fn std(&self, fan_in: usize) -> f64 {
        match self.kind {
            InitKind::FanInUniform => self.gain / (fan_in.max(1) as f64).sqrt(),
            InitKind::Normal => self.gain,
            InitKind::Zeros => 0.0,
        }
    }

    /// Samples a `[rows, cols]` tensor from a stream keyed by `(seed, name)`,
    /// so every tensor is reproducible independently of the others.
    pub fn sample<T: Scalar>(&self, name: &str, shape: [usize; 2], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let n = shape[0] * shape[1];
        match self.kind {
            InitKind::Zeros => Tensor::zeros(shape),
            InitKind::FanInUniform => {
                let a = self.gain * (3.0 / shape[0].max(1) as f64).sqrt();
                let data = (0..n).map(|_| T::from_f64_lossy(if a > 0.0 { rng.gen_range(-a..a) } else { 0.0 })).collect();
                Tensor::new(shape, data).expect("init shape")
            }
            InitKind::Normal => {
                let d = Normal::new(0.0, self.gain).expect("finite gain");
                let data = (0..n).map(|_| T::from_f64_lossy(d.sample(&mut rng))).collect();
                Tensor::new(shape, data).expect("init shape")
            }
        }
    }
}

/// Fresh parameters for a model trained from scratch: unit norm gains,
/// unit-variance embeddings, fan-in scaled projections.
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    let proj = InitScheme::default();
    let embed = InitScheme { kind: InitKind::Normal, gain: 1.0 };
    for (name, shape) in spec.param_shapes()? {
        let t = if name.ends_with("norm.weight") {
            Tensor::full(shape, T::one())
        } else if name == "embed.weight" {
            embed.sample(&name, shape, seed)
        } else {
            proj.sample(&name, shape, seed)
        };
        store.insert(name, t);
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTarget {
    Identity,
    Mla,
    Gateswa,
}

impl std::str::FromStr for EditTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "mla" => Ok(Self::Mla),
            "gateswa" => Ok(Self::Gateswa),
            other => Err(Error::config(format!("unknown edit target {other:?} (identity | mla | gateswa)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditOptions {
    pub target: EditTarget,
    /// Latent dims; defaults to [`MlaConfig::desk`] of the teacher.
    pub mla: Option<MlaConfig>,
    pub window: usize,
    pub ratio_s: usize,
    pub ratio_f: usize,
    /// Gate the full-attention layers of a GateSWA model too.
    pub gate_full: bool,
    /// Re-initialize shape-compatible Q/K/V instead of copying them.
    pub reinit_qkv: bool,
    /// Edited layer set; by default every layer whose attention changes.
    pub edited_layers: Option<Vec<usize>>,
    pub init: InitScheme,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            target: EditTarget::Identity,
            mla: None,
            window: 32,
            ratio_s: 5,
            ratio_f: 1,
            gate_full: true,
            reinit_qkv: false,
            edited_layers: None,
            init: InitScheme::default(),
        }
    }
}

impl EditOptions {
    pub fn new(target: EditTarget) -> Self {
        Self { target, ..Self::default() }
    }
}

/// Student spec and edited layer set for a teacher and edit options.
pub fn edit_spec(teacher: &ModelSpec, opts: &EditOptions) -> Result<(ModelSpec, Vec<usize>)> {
    teacher.validate()?;
    let l = teacher.n_layers;
    let mut student = teacher.clone();
    let edited: Vec<usize> = match opts.target {
        EditTarget::Identity => {
            if opts.edited_layers.as_ref().is_some_and(|b| !b.is_empty()) {
                return Err(Error::config("identity edit cannot edit layers"));
            }
            Vec::new()
        }
        EditTarget::Mla => {
            let b = opts.edited_layers.clone().unwrap_or_else(|| (0..l).collect());
            let base = &teacher.layers[0];
            let m = opts.mla.unwrap_or_else(|| MlaConfig::desk(teacher.d_model, base.head_dim));
            for &i in &b {
                student.layers.get_mut(i).ok_or_else(|| Error::config(format!("edited layer {i} ≥ {l}")))?;
                student.layers[i] = teacher.layers[i].to_mla(m);
            }
            b
        }
        EditTarget::Gateswa => {
            let sched = build_schedule(l, opts.ratio_s, opts.ratio_f)?;
            let b = opts.edited_layers.clone().unwrap_or_else(|| {
                (0..l).filter(|&i| opts.gate_full || sched.variants[i] == Variant::SwaLocal).collect()
            });
            for &i in &b {
                let a = student.layers.get(i).ok_or_else(|| Error::config(format!("edited layer {i} ≥ {l}")))?;
                student.layers[i] = match sched.variants[i] {
                    Variant::SwaLocal => a.to_swa_local(opts.window, true),
                    _ => a.to_swa_full(opts.gate_full),
                };
            }
            b
        }
    };
    let edited: Vec<usize> = edited.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    student.validate()?;
    Ok((student, edited))
}

/// Partition of the student's parameters into copied and freshly sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantPlan {
    pub edited_layers: Vec<usize>,
    pub keep_paths: Vec<String>,
    pub edit_paths: Vec<String>,
    pub init: InitScheme,
    pub seed: u64,
}

fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

fn is_attn(name: &str) -> bool {
    name.contains(".attn.")
}

impl TransplantPlan {
    /// Attention tensors of edited layers are sampled unless the teacher
    /// holds a same-named, same-shaped tensor of the same attention family
    /// (and `reinit_qkv` is off). `o_proj` is always copied.
    pub fn new(
        teacher: &ModelSpec,
        student: &ModelSpec,
        edited: &[usize],
        reinit_qkv: bool,
        init: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        let t_shapes: BTreeMap<String, [usize; 2]> = teacher.param_shapes()?.into_iter().collect();
        let edited_set: BTreeSet<usize> = edited.iter().copied().collect();
        let (mut keep, mut edit) = (Vec::new(), Vec::new());
        for (name, shape) in student.param_shapes()? {
            let fresh = match layer_of(&name) {
                Some(i) if edited_set.contains(&i) && is_attn(&name) && !name.ends_with(".o_proj") => {
                    let family_changed = (student.layers[i].variant == Variant::Mla) != (teacher.layers[i].variant == Variant::Mla);
                    let qkv = [".q_proj", ".k_proj", ".v_proj"].iter().any(|s| name.ends_with(s));
                    family_changed || t_shapes.get(&name) != Some(&shape) || (reinit_qkv && qkv)
                }
                _ => false,
            };
            if fresh { edit.push(name) } else { keep.push(name) }
        }
        let plan = Self { edited_layers: edited_set.into_iter().collect(), keep_paths: keep, edit_paths: edit, init, seed };
        plan.validate(student)?;
        Ok(plan)
    }

    pub fn validate(&self, student: &ModelSpec) -> Result<()> {
        let keep: BTreeSet<&str> = self.keep_paths.iter().map(String::as_str).collect();
        let edit: BTreeSet<&str> = self.edit_paths.iter().map(String::as_str).collect();
        if let Some(p) = keep.intersection(&edit).next() {
            return Err(Error::Transplant(format!("{p} is both kept and edited")));
        }
        let all: BTreeSet<String> = student.param_shapes()?.into_iter().map(|(n, _)| n).collect();
        let covered: BTreeSet<String> = keep.union(&edit).map(|s| s.to_string()).collect();
        if all != covered {
            let missing: Vec<_> = all.difference(&covered).collect();
            let extra: Vec<_> = covered.difference(&all).collect();
            return Err(Error::Transplant(format!("plan does not match the student: missing {missing:?}, unknown {extra:?}")));
        }
        if let Some(p) = edit.iter().find(|p| p.ends_with(".o_proj")) {
            return Err(Error::Transplant(format!("output projection {p} must be kept")));
        }
        Ok(())
    }

    /// `name → "kept" | "edited"`.
    pub fn provenance(&self) -> BTreeMap<String, &'static str> {
        let mut m: BTreeMap<String, &'static str> = self.keep_paths.iter().map(|p| (p.clone(), "kept")).collect();
        m.extend(self.edit_paths.iter().map(|p| (p.clone(), "edited")));
        m
    }
}

/// Samples every edit tensor of `plan` for `student`.
pub fn init_edit_params<T: Scalar>(student: &ModelSpec, plan: &TransplantPlan) -> Result<ParamStore<T>> {
    let shapes: BTreeMap<String, [usize; 2]> = student.param_shapes()?.into_iter().collect();
    let mut out = ParamStore::new();
    for name in &plan.edit_paths {
        let shape = *shapes.get(name).ok_or_else(|| Error::Transplant(format!("{name} is not a student parameter")))?;
        out.insert(name.clone(), plan.init.sample(name, shape, plan.seed));
    }
    Ok(out)
}

/// `θ^S = θ_keep ∪ θ_edit`: kept tensors are shared with the teacher
/// (bit-exact), edited ones sampled.
pub fn transplant<T: Scalar>(teacher: &ParamStore<T>, student: &ModelSpec, plan: &TransplantPlan) -> Result<ParamStore<T>> {
    plan.validate(student)?;
    let shapes: BTreeMap<String, [usize; 2]> = student.param_shapes()?.into_iter().collect();
    let mut out = init_edit_params(student, plan)?;
    for name in &plan.keep_paths {
        let t = teacher
            .get(name)
            .ok_or_else(|| Error::Transplant(format!("kept parameter {name} missing from the teacher")))?;
        if t.shape() != shapes[name] {
            return Err(Error::Transplant(format!("{name}: teacher {:?} vs student {:?}", t.shape(), shapes[name])));
        }
        out.insert_shared(name.clone(), teacher.shared(name)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_scheme_is_a_config_error() {
        assert!(matches!(InitScheme::from_name("xavier_magic", 1.0), Err(Error::Config(_))));
        assert_eq!(InitScheme::from_name("zeros", 1.0).unwrap().kind, InitKind::Zeros);
    }

    #[test]
    fn per_tensor_streams_differ() {
        let s = InitScheme::default();
        let a: Tensor<f64> = s.sample("a", [4, 4], 1);
        let b: Tensor<f64> = s.sample("b", [4, 4], 1);
        assert_ne!(a, b);
        assert_eq!(a, s.sample("a", [4, 4], 1));
    }
}

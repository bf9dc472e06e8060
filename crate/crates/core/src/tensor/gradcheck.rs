use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max |analytic − central| / (|analytic| + |central| + 1e-12)
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// (parameter index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences on up to `samples` coordinates drawn without
/// replacement across all `params`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64, samples: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::config(format!("grad_check step must be positive, got {step}")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.check()?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: f = {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.numel();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        sample(&mut rng, total, samples).into_vec()
    };
    picks.sort_unstable();

    let mut work = params.to_vec();
    let mut result = GradCheck { max_rel_error: 0.0, coordinates: picks.len(), worst: (0, 0) };
    for flat in picks {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let ei = flat - offsets[pi];
        let orig = work[pi].data()[ei];
        work[pi].data_mut()[ei] = orig + step;
        let plus = eval(&work)?;
        work[pi].data_mut()[ei] = orig - step;
        let minus = eval(&work)?;
        work[pi].data_mut()[ei] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[pi][ei];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if rel > result.max_rel_error {
            result.max_rel_error = rel;
            result.worst = (pi, ei);
        }
    }
    Ok(result)
}

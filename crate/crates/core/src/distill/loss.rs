//! Distillation objectives, as graph nodes and as plain value functions.

use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

/// `‖û − u‖²_F / (‖u‖²_F + eps)`; the target is a constant.
pub fn block_loss<T: Scalar>(g: &mut Graph<T>, u_hat: Var, u: &Tensor<T>, eps: f64) -> Result<Var> {
    if eps <= 0.0 {
        return Err(Error::config(format!("block loss eps must be positive, got {eps}")));
    }
    if g.shape(u_hat) != u.shape() {
        return Err(Error::dim(format!("block_loss: {:?} vs {:?}", g.shape(u_hat), u.shape())));
    }
    let denom = u.sum_sq().as_f64() + eps;
    let target = g.constant(u.clone());
    let diff = g.sub(u_hat, target)?;
    let sq = g.sum_sq(diff);
    Ok(g.scale(sq, T::from_f64_lossy(1.0 / denom)))
}

fn count_valid(mask: &[bool]) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::contract("every position is masked")),
        n => Ok(n),
    }
}

/// `(τ²/N) Σ_t KL(softmax(z_T/τ) ‖ softmax(z_S/τ))` over unmasked rows.
pub fn kd_loss<T: Scalar>(g: &mut Graph<T>, z_student: Var, z_teacher: &Tensor<T>, tau: f64, mask: &[bool]) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let n = count_valid(mask)?;
    g.kd_div(z_student, z_teacher, tau, mask, tau * tau / n as f64)
}

/// Mean of `1 − cos` over unmasked tokens and all `(student, teacher)`
/// hidden-state pairs.
pub fn cos_loss<T: Scalar>(g: &mut Graph<T>, pairs: &[(Var, &Tensor<T>)], mask: &[bool]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::contract("cos_loss needs at least one layer"));
    }
    let n = count_valid(mask)?;
    let factor = 1.0 / (n * pairs.len()) as f64;
    let mut total: Option<Var> = None;
    for (h, t) in pairs {
        let c = g.cosine_distance(*h, t, mask, factor)?;
        total = Some(match total {
            Some(acc) => g.add(acc, c)?,
            None => c,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `kd + λ·cos`.
pub fn model_loss<T: Scalar>(g: &mut Graph<T>, kd: Var, cos: Option<Var>, lambda: f64) -> Result<Var> {
    match cos {
        Some(c) if lambda != 0.0 => {
            let c = g.scale(c, T::from_f64_lossy(lambda));
            g.add(kd, c)
        }
        _ => Ok(kd),
    }
}

fn eval_scalar<T: Scalar>(build: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    g.check()?;
    Ok(g.value(v).item().as_f64())
}

pub fn block_loss_value<T: Scalar>(u_hat: &Tensor<T>, u: &Tensor<T>, eps: f64) -> Result<f64> {
    eval_scalar(|g| {
        let x = g.constant(u_hat.clone());
        block_loss(g, x, u, eps)
    })
}

pub fn kd_loss_value<T: Scalar>(z_student: &Tensor<T>, z_teacher: &Tensor<T>, tau: f64, mask: &[bool]) -> Result<f64> {
    eval_scalar(|g| {
        let z = g.constant(z_student.clone());
        kd_loss(g, z, z_teacher, tau, mask)
    })
}

pub fn cos_loss_value<T: Scalar>(pairs: &[(&Tensor<T>, &Tensor<T>)], mask: &[bool]) -> Result<f64> {
    eval_scalar(|g| {
        let vars: Vec<(Var, &Tensor<T>)> = pairs.iter().map(|(s, t)| (g.constant((*s).clone()), *t)).collect();
        cos_loss(g, &vars, mask)
    })
}

pub fn model_loss_value(kd: f64, cos: f64, lambda: f64) -> f64 {
    kd + lambda * cos
}

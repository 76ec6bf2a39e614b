//! Ranking and distillation objectives.

mod distill;

pub use distill::{
    swa_average, teacher_logits, train_student, DistillConfig, StudentReport, TeacherModel,
};

use crate::error::{Error, Result};
use crate::stats;
use crate::tensor::{Tensor, Var};

/// Differentiable Spearman correlation between logits `r` and labels `y`.
///
/// The logits are z-scored, soft-ranked with
/// `rank_i = 1 + Σ_{j≠i} σ(sharpness · (z_i − z_j))`, and correlated (Pearson)
/// with the exact average ranks of `y`. Gradients flow to `r` only.
pub fn soft_spearman<'t>(r: Var<'t>, y: &[f64], sharpness: f64) -> Result<Var<'t>> {
    let s = y.len();
    if s < 2 || r.shape() != [s] {
        return Err(Error::Undefined(format!(
            "soft spearman needs matching vectors of length >= 2 (logits {:?}, labels {s})",
            r.shape()
        )));
    }
    let ry = stats::ranks(y);
    let my = stats::mean(&ry);
    let norm: f64 = ry.iter().map(|v| (v - my) * (v - my)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Undefined(
            "rank correlation undefined for constant labels".into(),
        ));
    }
    let target: Vec<f64> = ry.iter().map(|v| (v - my) / norm).collect();
    let tape = r.tape();

    let centered = r.sub(r.mean())?;
    let inv_std = centered.mul(centered)?.mean().affine(1.0, 1e-12).powf(-0.5);
    let z = centered.mul(inv_std)?;
    let diff = z.reshape(&[s, 1])?.sub(z.reshape(&[1, s])?)?;
    let soft_rank = diff
        .scale(sharpness)
        .sigmoid()
        .sum_axis(1)?
        .affine(1.0, 0.5);
    let sc = soft_rank.sub(soft_rank.mean())?;
    let num = sc.mul(tape.constant(Tensor::from_vec(target)))?.sum();
    let inv_den = sc.mul(sc)?.sum().affine(1.0, 1e-12).powf(-0.5);
    Ok(num.mul(inv_den)?)
}

/// `softmax((1/τ) · mean_j r_j)` over the stock axis.
pub fn ensemble_target(teacher_logits: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    let first = teacher_logits
        .first()
        .ok_or_else(|| Error::config("ensemble target needs at least one teacher"))?;
    if tau <= 0.0 {
        return Err(Error::config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let s = first.len();
    if teacher_logits.iter().any(|l| l.len() != s) {
        return Err(Error::config(
            "teacher logits disagree on the number of stocks",
        ));
    }
    let n = teacher_logits.len() as f64;
    let avg: Vec<f64> = (0..s)
        .map(|i| teacher_logits.iter().map(|l| l[i]).sum::<f64>() / n / tau)
        .collect();
    Ok(softmax(&avg))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// `(1 − ε) p + ε / S`.
pub fn smooth_target(p: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::config(format!(
            "label smoothing must lie in [0, 1], got {eps}"
        )));
    }
    let u = 1.0 / p.len() as f64;
    Ok(p.iter().map(|v| (1.0 - eps) * v + eps * u).collect())
}

/// Cross-entropy `−Σ target_i log softmax(logits)_i`.
pub fn distill_loss<'t>(student_logits: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    if student_logits.shape() != [target.len()] {
        return Err(Error::config(format!(
            "distillation target has {} entries for logits {:?}",
            target.len(),
            student_logits.shape()
        )));
    }
    let t = student_logits
        .tape()
        .constant(Tensor::from_vec(target.to_vec()));
    Ok(student_logits.log_softmax()?.mul(t)?.sum().neg())
}

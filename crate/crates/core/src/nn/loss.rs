//! Cross-entropy losses and their logit gradients.
//!
//! Labels come in two forms:
//! - hard: shape `[B]`, class indices (multiclass) or 0/1 targets (binary);
//! - soft: shape `[B × C]` (multiclass) or `[B × 1]` (binary), a target
//!   distribution per row. Soft targets are what the gradient-matching
//!   baseline optimizes.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Softmax cross-entropy over `C ≥ 2` logits.
    Multiclass,
    /// Sigmoid cross-entropy over a single logit.
    Binary,
}

/// Expands `labels` into a dense `[B × C]` target matrix, validating ranges.
fn targets(task: Task, batch: usize, classes: usize, labels: &Tensor) -> Result<Vec<f64>> {
    let shape = labels.shape();
    if shape.is_empty() || shape[0] != batch {
        return Err(dim_err!("labels {:?} do not match batch size {}", shape, batch));
    }
    let soft = shape.len() == 2;
    if shape.len() > 2 || (soft && shape[1] != classes) {
        return Err(dim_err!("labels {:?} do not match {} outputs", shape, classes));
    }
    if soft {
        let t = labels.data().to_vec();
        if t.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(input_err!("soft labels must lie in [0, 1]"));
        }
        return Ok(t);
    }
    match task {
        Task::Multiclass => {
            let mut t = vec![0.0; batch * classes];
            for (b, &y) in labels.data().iter().enumerate() {
                if y.fract() != 0.0 || y < 0.0 || y >= classes as f64 {
                    return Err(input_err!("label {} out of class range 0..{}", y, classes));
                }
                t[b * classes + y as usize] = 1.0;
            }
            Ok(t)
        }
        Task::Binary => {
            if labels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(input_err!("binary labels must lie in [0, 1]"));
            }
            Ok(labels.data().to_vec())
        }
    }
}

fn check_logits(task: Task, logits: &Tensor) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(dim_err!("logits must be [B × C], got {:?}", logits.shape()));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    match task {
        Task::Binary if c != 1 => Err(dim_err!("binary task expects one logit, got {}", c)),
        Task::Multiclass if c < 2 => Err(dim_err!("multiclass task needs ≥ 2 logits")),
        _ => Ok((b, c)),
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean cross-entropy over the batch.
pub fn loss(task: Task, logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let (batch, classes) = check_logits(task, logits)?;
    let t = targets(task, batch, classes, labels)?;
    let mut total = 0.0;
    for b in 0..batch {
        let z = logits.row(b);
        let y = &t[b * classes..(b + 1) * classes];
        total += match task {
            Task::Multiclass => {
                let lse = log_sum_exp(z);
                y.iter().zip(z).map(|(yi, zi)| yi * (lse - zi)).sum::<f64>()
            }
            Task::Binary => {
                let (z, y) = (z[0], y[0]);
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            }
        };
    }
    Ok((total / batch as f64).max(0.0))
}

/// Gradient of the mean loss w.r.t. the logits (includes the `1/B` factor).
pub fn loss_grad(task: Task, logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (batch, classes) = check_logits(task, logits)?;
    let t = targets(task, batch, classes, labels)?;
    let inv_b = 1.0 / batch as f64;
    let mut g = vec![0.0; batch * classes];
    for b in 0..batch {
        let z = logits.row(b);
        let y = &t[b * classes..(b + 1) * classes];
        let gb = &mut g[b * classes..(b + 1) * classes];
        match task {
            Task::Multiclass => softmax_into(z, gb),
            Task::Binary => gb[0] = sigmoid(z[0]),
        }
        for (gi, yi) in gb.iter_mut().zip(y) {
            *gi = (*gi - yi) * inv_b;
        }
    }
    Ok(Tensor::from_parts(vec![batch, classes], g))
}

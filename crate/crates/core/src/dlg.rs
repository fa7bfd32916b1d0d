//! Gradient-matching reconstruction baseline.
//!
//! A dummy input `x̂` and dummy label logits `ŷ` are moved by plain gradient
//! descent so that the gradients they induce match an observed update. The
//! gradient of the matching loss w.r.t. `(x̂, ŷ)` is second order; it is
//! taken by central finite differences, or analytically for
//! `Dense → ReLU → Dense` multiclass models.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::nn::{self, softmax_into, Layer, Model, ModelGradients, Task};
use crate::rng::{self, streams, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OuterGradient {
    #[default]
    FiniteDifference,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlgConfig {
    pub iterations: usize,
    pub alpha: f64,
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub outer: OuterGradient,
}

fn one() -> usize {
    1
}

fn default_fd_step() -> f64 {
    1e-5
}

impl Default for DlgConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            alpha: 0.1,
            restarts: 2,
            fd_step: default_fd_step(),
            outer: OuterGradient::FiniteDifference,
        }
    }
}

impl DlgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(config_err!("dlg needs at least one restart"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(config_err!("dlg step size must be positive"));
        }
        if !(self.fd_step > 0.0) {
            return Err(config_err!("finite-difference step must be positive"));
        }
        Ok(())
    }
}

/// Outcome of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlgRun {
    pub restart: usize,
    /// Final dummy input, `[1 × features]`.
    pub x: Tensor,
    pub label_logits: Vec<f64>,
    /// Matching loss before each step, then after the last one.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub alpha: f64,
    pub diverged: bool,
    pub wallclock_ms: f64,
}

impl DlgRun {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&f64::INFINITY)
    }
}

fn label_targets(task: Task, logits: &[f64]) -> Tensor {
    match task {
        Task::Multiclass => {
            let mut p = vec![0.0; logits.len()];
            softmax_into(logits, &mut p);
            Tensor::from_parts(vec![1, logits.len()], p)
        }
        Task::Binary => {
            let z = logits[0];
            Tensor::from_parts(vec![1, 1], vec![1.0 / (1.0 + (-z).exp())])
        }
    }
}

fn squared_distance(a: &ModelGradients, b: &ModelGradients) -> f64 {
    a.tensors()
        .zip(b.tensors())
        .map(|(x, y)| crate::tensor::l2_dist_sq(x.data(), y.data()))
        .sum()
}

/// `‖G − Ĝ(x̂, ŷ)‖²` summed over every parameter tensor; `ŷ` is given as
/// logits and passed through softmax (sigmoid for binary models).
pub fn matching_loss(model: &Model, target: &ModelGradients, x: &Tensor, label_logits: &[f64]) -> Result<f64> {
    if !target.matches(model) {
        return Err(dim_err!("target gradients do not match the model"));
    }
    if x.len() != model.input_len() {
        return Err(dim_err!("dummy input has {} values, model expects {}", x.len(), model.input_len()));
    }
    if label_logits.len() != model.output_dim() {
        return Err(dim_err!("{} label logits for {} outputs", label_logits.len(), model.output_dim()));
    }
    let xb = x.clone().reshape(&[1, model.input_len()])?;
    let g = nn::gradients(model, &xb, &label_targets(model.task(), label_logits))?;
    Ok(squared_distance(&g, target))
}

fn finite_difference(model: &Model, target: &ModelGradients, theta: &[f64], d: usize, h: f64) -> Result<Vec<f64>> {
    let eval = |t: &[f64]| matching_loss(model, target, &Tensor::from_parts(vec![1, d], t[..d].to_vec()), &t[d..]);
    let mut t = theta.to_vec();
    let mut g = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = t[i];
        t[i] = orig + h;
        let fp = eval(&t)?;
        t[i] = orig - h;
        let fm = eval(&t)?;
        t[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Analytic gradient of the matching loss for `Dense → ReLU → Dense`
/// multiclass models. Returns `(∂D/∂x̂, ∂D/∂ŷ-logits)`.
pub fn analytic_outer_gradient(
    model: &Model,
    target: &ModelGradients,
    x: &[f64],
    label_logits: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (Some(l1), Some(Layer::Relu), Some(l2)) = (model.dense(0), model.layers().get(1), model.dense(2)) else {
        return Err(config_err!("analytic outer gradient needs a Dense-ReLU-Dense model"));
    };
    if model.layers().len() != 3 || model.task() != Task::Multiclass {
        return Err(config_err!("analytic outer gradient needs a Dense-ReLU-Dense multiclass model"));
    }
    if !target.matches(model) {
        return Err(dim_err!("target gradients do not match the model"));
    }
    let (n_in, n_h, n_c) = (l1.in_dim(), l1.out_dim(), l2.out_dim());
    if x.len() != n_in || label_logits.len() != n_c {
        return Err(dim_err!("dummy input or label logits have the wrong size"));
    }
    let (w1, w2) = (l1.weight.data(), l2.weight.data());
    let (t_w1, t_b1) = target.dense(0).expect("matched");
    let (t_w2, t_b2) = target.dense(2).expect("matched");

    let h: Vec<f64> = (0..n_h)
        .map(|j| l1.bias.data()[j] + (0..n_in).map(|i| w1[j * n_in + i] * x[i]).sum::<f64>())
        .collect();
    let mask: Vec<f64> = h.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    let a: Vec<f64> = h.iter().map(|&v| v.max(0.0)).collect();
    let z: Vec<f64> = (0..n_c)
        .map(|c| l2.bias.data()[c] + (0..n_h).map(|j| w2[c * n_h + j] * a[j]).sum::<f64>())
        .collect();
    let mut p = vec![0.0; n_c];
    softmax_into(&z, &mut p);
    let mut y = vec![0.0; n_c];
    softmax_into(label_logits, &mut y);
    let d2: Vec<f64> = p.iter().zip(&y).map(|(p, y)| p - y).collect();
    let d1: Vec<f64> = (0..n_h)
        .map(|j| mask[j] * (0..n_c).map(|c| w2[c * n_h + j] * d2[c]).sum::<f64>())
        .collect();

    // residuals 2(G - T)
    let r_w1 = |j: usize, i: usize| 2.0 * (d1[j] * x[i] - t_w1.data()[j * n_in + i]);
    let r_b1: Vec<f64> = (0..n_h).map(|j| 2.0 * (d1[j] - t_b1.data()[j])).collect();
    let r_w2 = |c: usize, j: usize| 2.0 * (d2[c] * a[j] - t_w2.data()[c * n_h + j]);
    let r_b2: Vec<f64> = (0..n_c).map(|c| 2.0 * (d2[c] - t_b2.data()[c])).collect();

    // u1 = R_W1 x + R_b1 over hidden units
    let u1: Vec<f64> = (0..n_h)
        .map(|j| r_b1[j] + (0..n_in).map(|i| r_w1(j, i) * x[i]).sum::<f64>())
        .collect();
    // coefficient of dδ2
    let v2: Vec<f64> = (0..n_c)
        .map(|c| {
            r_b2[c]
                + (0..n_h).map(|j| r_w2(c, j) * a[j]).sum::<f64>()
                + (0..n_h).map(|j| w2[c * n_h + j] * mask[j] * u1[j]).sum::<f64>()
        })
        .collect();
    let jv = |s: &[f64], v: &[f64]| -> Vec<f64> {
        let dot: f64 = s.iter().zip(v).map(|(a, b)| a * b).sum();
        s.iter().zip(v).map(|(si, vi)| si * (vi - dot)).collect()
    };
    let jp_v2 = jv(&p, &v2);
    let gl: Vec<f64> = jv(&y, &v2).iter().map(|v| -v).collect();

    // back to hidden pre-activations
    let mut back_h = vec![0.0; n_h];
    for (j, bh) in back_h.iter_mut().enumerate() {
        let r2d2: f64 = (0..n_c).map(|c| r_w2(c, j) * d2[c]).sum();
        let w2jp: f64 = (0..n_c).map(|c| w2[c * n_h + j] * jp_v2[c]).sum();
        *bh = mask[j] * (r2d2 + w2jp);
    }
    let gx: Vec<f64> = (0..n_in)
        .map(|i| {
            (0..n_h).map(|j| r_w1(j, i) * d1[j]).sum::<f64>() + (0..n_h).map(|j| w1[j * n_in + i] * back_h[j]).sum::<f64>()
        })
        .collect();
    Ok((gx, gl))
}

fn run_once(model: &Model, target: &ModelGradients, cfg: &DlgConfig, restart: usize, rng: &mut Rng) -> Result<DlgRun> {
    let start = Instant::now();
    let d = model.input_len();
    let c = model.output_dim();
    let mut theta: Vec<f64> = (0..d + c).map(|_| StandardNormal.sample(rng)).collect();
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    let mut diverged = false;
    let mut done = 0;
    for _ in 0..cfg.iterations {
        let xt = Tensor::from_parts(vec![1, d], theta[..d].to_vec());
        let loss = matching_loss(model, target, &xt, &theta[d..])?;
        losses.push(loss);
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        let grad = match cfg.outer {
            OuterGradient::FiniteDifference => finite_difference(model, target, &theta, d, cfg.fd_step)?,
            OuterGradient::Analytic => {
                let (gx, gl) = analytic_outer_gradient(model, target, &theta[..d], &theta[d..])?;
                gx.into_iter().chain(gl).collect()
            }
        };
        theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= cfg.alpha * g);
        done += 1;
        if theta.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
    }
    if !diverged {
        let xt = Tensor::from_parts(vec![1, d], theta[..d].to_vec());
        let last = matching_loss(model, target, &xt, &theta[d..])?;
        diverged = !last.is_finite();
        losses.push(last);
    }
    Ok(DlgRun {
        restart,
        x: Tensor::from_parts(vec![1, d], theta[..d].to_vec()),
        label_logits: theta[d..].to_vec(),
        losses,
        iterations: done,
        alpha: cfg.alpha,
        diverged,
        wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs `cfg.restarts` optimizations and returns every run plus the index of
/// the best one (lowest final loss, diverged runs last).
pub fn dlg_all(model: &Model, target: &ModelGradients, cfg: &DlgConfig, rng: &mut Rng) -> Result<(Vec<DlgRun>, usize)> {
    cfg.validate()?;
    if !target.matches(model) {
        return Err(dim_err!("target gradients do not match the model"));
    }
    // one seed per restart so the parallel runs do not share a stream
    let seeds: Vec<u64> = (0..cfg.restarts).map(|_| rng.random()).collect();
    let runs = std::thread::scope(|sc| {
        let handles: Vec<_> = seeds
            .iter()
            .enumerate()
            .map(|(r, &seed)| sc.spawn(move || run_once(model, target, cfg, r, &mut rng::stream(seed, streams::DLG))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("dlg restart panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let best = runs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (a.diverged, a.final_loss())
                .partial_cmp(&(b.diverged, b.final_loss()))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|(i, _)| i)
        .expect("at least one restart");
    Ok((runs, best))
}

/// Best run over `cfg.restarts`; its wall-clock is that of the whole call,
/// restarts included.
pub fn dlg_reconstruct(model: &Model, target: &ModelGradients, cfg: &DlgConfig, rng: &mut Rng) -> Result<DlgRun> {
    let start = Instant::now();
    let (mut runs, best) = dlg_all(model, target, cfg, rng)?;
    let mut run = runs.swap_remove(best);
    run.wallclock_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(run)
}

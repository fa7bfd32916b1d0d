//! Analytic extraction of inputs from dense-layer gradients and its scoring.
//!
//! For a dense layer `y = W x + b` the gradient row of neuron `i` is the
//! bias gradient of `i` times the input, summed over the examples that
//! activate `i`. Dividing the row by the bias gradient therefore returns
//! the input exactly whenever a single example activated the neuron.

mod text;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, input_err, Result};
use crate::init::ForwardingPlan;
use crate::nn::{Layer, Model, ModelGradients};
use crate::tensor::{l2_dist_sq, Tensor};

pub use text::{build_embedding_lookup, reconstruct_tokens, score_tokens, EmbeddingLookup, SENTINEL};

/// Rows with `|bias grad| ≤ EPS_ACTIVE` count as inactive.
pub const EPS_ACTIVE: f64 = 1e-12;
/// Relative L2 error at or below which a reconstruction counts as exact.
pub const TOL_REL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionCandidate {
    pub row: usize,
    pub x: Tensor,
    /// The bias-gradient entry the row was divided by.
    pub scale: f64,
}

/// All candidates of one layer plus the row counts needed for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    /// Number of rows `N` in the layer.
    pub rows: usize,
    pub candidates: Vec<ExtractionCandidate>,
}

impl Extraction {
    pub fn active(&self) -> usize {
        self.candidates.len()
    }
}

/// `x̂ = W-grad[i] / b-grad[i]` for every row whose bias gradient exceeds
/// `eps_active` in magnitude.
pub fn extract_candidates(weight_grad: &Tensor, bias_grad: &Tensor, eps_active: f64) -> Result<Extraction> {
    if weight_grad.shape().len() != 2 || bias_grad.shape() != [weight_grad.shape()[0]] {
        return Err(dim_err!(
            "weight gradient {:?} and bias gradient {:?} disagree",
            weight_grad.shape(),
            bias_grad.shape()
        ));
    }
    let width = weight_grad.shape()[1];
    let candidates = bias_grad
        .data()
        .iter()
        .enumerate()
        .filter(|(_, g)| g.abs() > eps_active)
        .map(|(i, &g)| {
            let inv = 1.0 / g;
            let x = weight_grad.row(i).iter().map(|v| v * inv).collect();
            ExtractionCandidate {
                row: i,
                x: Tensor::from_parts(vec![width], x),
                scale: g,
            }
        })
        .collect();
    Ok(Extraction {
        rows: bias_grad.len(),
        candidates,
    })
}

/// Extracts from dense layer `target` and maps candidates back to model-input
/// space through `plan`.
///
/// Every parameter layer before `target` must be covered by `plan`, except a
/// leading embedding, in which case candidates stay in embedded space.
pub fn extract_from_model(
    model: &Model,
    grads: &ModelGradients,
    target: usize,
    plan: Option<&ForwardingPlan>,
    eps_active: f64,
) -> Result<Extraction> {
    if !grads.matches(model) {
        return Err(dim_err!("gradients do not match the model"));
    }
    let (gw, gb) = grads
        .dense(target)
        .ok_or_else(|| config_err!("layer {} is not a dense layer", target))?;
    let mut ex = extract_candidates(gw, gb, eps_active)?;
    let mut covered: Vec<usize> = plan
        .map(|p| p.conv.iter().map(|c| c.layer).chain(p.fc.iter().map(|f| f.layer)).collect())
        .unwrap_or_default();
    covered.sort_unstable();
    let needed: Vec<usize> = model.layers()[..target]
        .iter()
        .enumerate()
        .filter(|(i, l)| l.has_params() && !(*i == 0 && matches!(l, Layer::Embedding(_))))
        .map(|(i, _)| i)
        .collect();
    if needed != covered {
        return Err(config_err!(
            "layers {:?} precede the target but the forwarding plan covers {:?}",
            needed,
            covered
        ));
    }
    if let Some(p) = plan.filter(|p| !p.is_empty()) {
        let routes = p.routes(model)?;
        let shape = model.input_shape().to_vec();
        for c in &mut ex.candidates {
            c.x = Tensor::from_parts(shape.clone(), p.unmap(&routes, c.x.data()));
        }
    }
    Ok(ex)
}

/// Success metrics of one extraction against the true examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    /// Active rows over all rows.
    pub a: f64,
    /// Exact rows over all rows, `G₀ / N`.
    pub p: f64,
    /// Distinct examples recovered, `B₀ / B`.
    pub r: f64,
    pub n: usize,
    pub b: usize,
    pub active: usize,
    pub g0: usize,
    pub b0: usize,
}

impl AttackMetrics {
    pub fn from_counts(n: usize, b: usize, active: usize, g0: usize, b0: usize) -> Self {
        let div = |x: usize, y: usize| if y == 0 { 0.0 } else { x as f64 / y as f64 };
        Self {
            a: div(active, n),
            p: div(g0, n),
            r: div(b0, b),
            n,
            b,
            active,
            g0,
            b0,
        }
    }
}

/// Nearest true example of one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub candidate: usize,
    pub nearest: usize,
    /// `‖x̂ − x‖ / ‖x‖` (absolute error when `x = 0`).
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub metrics: AttackMetrics,
    pub matches: Vec<Match>,
}

impl Score {
    /// Mean relative error over every candidate's nearest match; `None`
    /// without candidates.
    pub fn mean_rel_err(&self) -> Option<f64> {
        (!self.matches.is_empty()).then(|| self.matches.iter().map(|m| m.rel_err).sum::<f64>() / self.matches.len() as f64)
    }
}

/// Matches each candidate to its L2-nearest row of `truth` (`[B × …]`).
pub fn score(extraction: &Extraction, truth: &Tensor, tol_rel: f64) -> Result<Score> {
    let b = truth.rows();
    if b == 0 || truth.is_empty() {
        return Err(input_err!("ground-truth batch is empty"));
    }
    let width = truth.row_len();
    let norms: Vec<f64> = truth.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut matches = Vec::with_capacity(extraction.candidates.len());
    let mut hit = vec![false; b];
    let mut g0 = 0;
    for (ci, c) in extraction.candidates.iter().enumerate() {
        if c.x.len() != width {
            return Err(dim_err!("candidate of length {} against examples of length {}", c.x.len(), width));
        }
        let (nearest, d2) = nearest_row(c.x.data(), truth);
        let denom = if norms[nearest] > 0.0 { norms[nearest] } else { 1.0 };
        let rel_err = d2.sqrt() / denom;
        if rel_err <= tol_rel {
            g0 += 1;
            hit[nearest] = true;
        }
        matches.push(Match {
            candidate: ci,
            nearest,
            rel_err,
        });
    }
    let b0 = hit.iter().filter(|h| **h).count();
    Ok(Score {
        metrics: AttackMetrics::from_counts(extraction.rows, b, extraction.active(), g0, b0),
        matches,
    })
}

/// Index and squared distance of the nearest row, with early abandoning of
/// rows that already exceed the best distance.
fn nearest_row(x: &[f64], truth: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, row) in truth.iter_rows().enumerate() {
        let mut acc = 0.0;
        let mut abandoned = false;
        for (xc, rc) in x.chunks(64).zip(row.chunks(64)) {
            acc += l2_dist_sq(xc, rc);
            if acc >= best.1 {
                abandoned = true;
                break;
            }
        }
        if !abandoned {
            best = (i, acc);
        }
    }
    best
}

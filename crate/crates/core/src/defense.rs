//! Gradient clipping, Gaussian noising, magnitude pruning and DPSGD-style
//! local updates.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::fl::{sample_rows, GradientUpdate, RoundConfig, UserNode};
use crate::nn::{self, Model, ModelGradients};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSite {
    #[default]
    User,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Global L2 clip bound.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_site: NoiseSite,
    #[serde(default)]
    pub prune_fraction: f64,
    /// Clip per example and noise the average with std `sigma·c/B`
    /// instead of clipping and noising the whole update.
    #[serde(default)]
    pub dpsgd: bool,
    /// A server that is supposed to add the noise but does not.
    #[serde(default)]
    pub malicious_server: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            clip_norm: None,
            noise_sigma: 0.0,
            noise_site: NoiseSite::User,
            prune_fraction: 0.0,
            dpsgd: false,
            malicious_server: false,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(config_err!("clip norm must be positive, got {}", c));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config_err!("noise sigma must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(config_err!("prune fraction must lie in [0, 1)"));
        }
        if self.dpsgd && self.clip_norm.is_none() {
            return Err(config_err!("dpsgd needs a clip norm"));
        }
        Ok(())
    }

    /// Std of the Gaussian noise added at the configured site.
    pub fn noise_std(&self, batch_size: usize) -> f64 {
        match (self.dpsgd, self.clip_norm) {
            (true, Some(c)) => self.noise_sigma * c / batch_size as f64,
            _ => self.noise_sigma,
        }
    }
}

/// `g / max(1, ‖g‖/c)` with the norm taken over the whole update.
pub fn clip(update: &ModelGradients, c: f64) -> Result<ModelGradients> {
    let mut g = update.clone();
    clip_in_place(&mut g, c)?;
    Ok(g)
}

pub fn clip_in_place(g: &mut ModelGradients, c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(input_err!("clip norm must be positive, got {}", c));
    }
    let n = g.norm();
    if n > c {
        g.scale(c / n);
    }
    Ok(())
}

/// Adds i.i.d. `N(0, sigma²)` to every entry.
pub fn noise(update: &ModelGradients, sigma: f64, rng: &mut Rng) -> Result<ModelGradients> {
    let mut g = update.clone();
    noise_in_place(&mut g, sigma, rng)?;
    Ok(g)
}

pub fn noise_in_place(g: &mut ModelGradients, sigma: f64, rng: &mut Rng) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(input_err!("noise sigma must be nonnegative, got {}", sigma));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let d = Normal::new(0.0, sigma).expect("positive sigma");
    for t in g.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += d.sample(rng));
    }
    Ok(())
}

/// Zeroes the `⌊fraction·n⌋` entries of smallest magnitude (global over the
/// update; ties broken by position).
pub fn prune(update: &ModelGradients, fraction: f64) -> Result<ModelGradients> {
    let mut g = update.clone();
    prune_in_place(&mut g, fraction)?;
    Ok(g)
}

pub fn prune_in_place(g: &mut ModelGradients, fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(input_err!("prune fraction must lie in [0, 1), got {}", fraction));
    }
    let n = g.len();
    let cut = (fraction * n as f64).floor() as usize;
    if cut == 0 {
        return Ok(());
    }
    let mut mags: Vec<f64> = g.tensors().flat_map(|t| t.data().iter().map(|v| v.abs())).collect();
    let (_, &mut thresh, _) = mags.select_nth_unstable_by(cut - 1, f64::total_cmp);
    drop(mags);
    let below: usize = g.tensors().map(|t| t.data().iter().filter(|v| v.abs() < thresh).count()).sum();
    let mut ties = cut - below;
    for t in g.tensors_mut() {
        for v in t.data_mut() {
            if v.abs() < thresh {
                *v = 0.0;
            } else if v.abs() == thresh && ties > 0 {
                *v = 0.0;
                ties -= 1;
            }
        }
    }
    Ok(())
}

/// Applies the user-side part of `cfg` to a plain local update.
fn defend_update(g: &mut ModelGradients, cfg: &DefenseConfig, batch_size: usize, rng: &mut Rng) -> Result<()> {
    if let Some(c) = cfg.clip_norm {
        clip_in_place(g, c)?;
    }
    if cfg.prune_fraction > 0.0 {
        prune_in_place(g, cfg.prune_fraction)?;
    }
    if cfg.noise_site == NoiseSite::User {
        noise_in_place(g, cfg.noise_std(batch_size), rng)?;
    }
    Ok(())
}

/// Local update under `cfg`: either the plain update clipped, pruned and
/// noised as a whole, or (with `dpsgd`) the mean of per-example clipped
/// gradients. Noise is added here only when the site is the user.
pub fn defended_local_update(
    user: &UserNode,
    model: &Model,
    round_cfg: &RoundConfig,
    cfg: &DefenseConfig,
    round: usize,
    sample_rng: &mut Rng,
    noise_rng: &mut Rng,
) -> Result<GradientUpdate> {
    cfg.validate()?;
    let (b, k) = (round_cfg.batch_size, round_cfg.local_batches);
    if !cfg.dpsgd {
        let mut up = crate::fl::local_gradients(user, model, b, k, round, sample_rng)?;
        defend_update(&mut up.grads, cfg, b, noise_rng)?;
        return Ok(up);
    }
    let c = cfg.clip_norm.expect("validated");
    let samples = sample_rows(user, b, k, sample_rng)?;
    let mut acc = ModelGradients::zeros_like(model);
    for chunk in samples.chunks(b) {
        let x = user.features.select_rows(chunk)?;
        let y = user.labels.select_rows(chunk)?;
        nn::for_each_example_gradient(model, &x, &y, |_, mut g| {
            clip_in_place(&mut g, c)?;
            acc.add_scaled(&g, 1.0)
        })?;
    }
    acc.scale(1.0 / samples.len() as f64);
    if cfg.prune_fraction > 0.0 {
        prune_in_place(&mut acc, cfg.prune_fraction)?;
    }
    if cfg.noise_site == NoiseSite::User {
        noise_in_place(&mut acc, cfg.noise_std(b), noise_rng)?;
    }
    Ok(GradientUpdate {
        user: user.id,
        round,
        grads: acc,
        batch_size: b,
        local_batches: k,
        samples,
        trapped: false,
    })
}

/// Server-side noise on the aggregate; skipped by a malicious server.
pub(crate) fn server_noise(agg: &mut ModelGradients, cfg: &DefenseConfig, batch_size: usize, rng: &mut Rng) {
    if cfg.noise_site == NoiseSite::Server && !cfg.malicious_server {
        noise_in_place(agg, cfg.noise_std(batch_size), rng).expect("validated sigma");
    }
}

/// One DPSGD round over `users` on `model`: per-example clip at `c`, mean,
/// then `N(0, (sigma·c/B)²)` noise at the configured site. Returns the
/// individual updates (what the server observes) and the aggregate.
#[allow(clippy::too_many_arguments)]
pub fn dpsgd_round(
    users: &[UserNode],
    model: &Model,
    c: f64,
    sigma: f64,
    site: NoiseSite,
    malicious_server: bool,
    round_cfg: &RoundConfig,
    seed: u64,
) -> Result<(Vec<GradientUpdate>, ModelGradients)> {
    let cfg = DefenseConfig {
        clip_norm: Some(c),
        noise_sigma: sigma,
        noise_site: site,
        prune_fraction: 0.0,
        dpsgd: true,
        malicious_server,
    };
    let mut central = model.clone();
    let mut rc = *round_cfg;
    rc.lr = 0.0;
    rc.users_per_round = rc.users_per_round.min(users.len());
    let out = crate::fl::run_round(
        &mut central,
        users,
        &rc,
        &crate::fl::Dispatch::Honest,
        Some(&cfg),
        0,
        seed,
        &mut crate::fl::NoHook,
    )?;
    Ok((out.updates, out.aggregate))
}

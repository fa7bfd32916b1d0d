//! Federated averaging with gradient sharing.
//!
//! Each round the server picks `M` users without replacement, sends each a
//! model (possibly a manipulated copy), and every user returns the mean of
//! `k` batch-averaged gradients computed on disjoint mini-batches. A
//! [`RoundHook`] sees the individual updates before they are averaged.

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::defense::{self, DefenseConfig};
use crate::error::{config_err, dim_err, input_err, Result};
use crate::init::{self, ForwardingPlan, GainMode, TrapConfig};
use crate::nn::{self, Model, ModelGradients};
use crate::rng::{self, streams, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserNode {
    pub id: usize,
    pub features: Tensor,
    pub labels: Tensor,
    pub seed: u64,
}

impl UserNode {
    /// Features must be `[n × …]` with every entry in `[0, 1]`.
    pub fn new(id: usize, features: Tensor, labels: Tensor, seed: u64) -> Result<Self> {
        if features.shape().len() < 2 {
            return Err(dim_err!("user features must be [n × …], got {:?}", features.shape()));
        }
        if labels.rows() != features.rows() {
            return Err(dim_err!("{} labels for {} examples", labels.rows(), features.rows()));
        }
        if features.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(input_err!("user features must lie in [0, 1]"));
        }
        Ok(Self {
            id,
            features,
            labels,
            seed,
        })
    }

    /// Token users: `[n × seq_len]` integer ids below `vocab`.
    pub fn tokens(id: usize, ids: Tensor, labels: Tensor, vocab: usize, seed: u64) -> Result<Self> {
        if ids.shape().len() != 2 {
            return Err(dim_err!("token ids must be [n × seq_len], got {:?}", ids.shape()));
        }
        if labels.rows() != ids.rows() {
            return Err(dim_err!("{} labels for {} sequences", labels.rows(), ids.rows()));
        }
        if ids.data().iter().any(|&t| t < 0.0 || t.fract() != 0.0 || t >= vocab as f64) {
            return Err(input_err!("token ids must be integers in [0, {})", vocab));
        }
        Ok(Self {
            id,
            features: ids,
            labels,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    #[serde(default = "one")]
    pub users_per_round: usize,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub local_batches: usize,
    /// Learning rate; zero skips the model update.
    #[serde(default)]
    pub lr: f64,
}

fn one() -> usize {
    1
}

impl RoundConfig {
    pub fn new(batch_size: usize) -> Self {
        Self {
            users_per_round: 1,
            batch_size,
            local_batches: 1,
            lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.users_per_round == 0 || self.batch_size == 0 || self.local_batches == 0 {
            return Err(config_err!("M, B and k must all be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// One user's upload for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientUpdate {
    pub user: usize,
    pub round: usize,
    pub grads: ModelGradients,
    pub batch_size: usize,
    pub local_batches: usize,
    /// Dataset rows used, batch after batch. Evaluation-only knowledge; the
    /// server never reads it during an attack.
    pub samples: Vec<usize>,
    /// Whether the user received the manipulated model.
    pub trapped: bool,
}

/// Mean of `k` batch gradients on disjoint mini-batches drawn without
/// replacement from the user's data.
pub fn local_gradients(
    user: &UserNode,
    model: &Model,
    batch_size: usize,
    local_batches: usize,
    round: usize,
    rng: &mut Rng,
) -> Result<GradientUpdate> {
    let samples = sample_rows(user, batch_size, local_batches, rng)?;
    let mut acc: Option<ModelGradients> = None;
    for chunk in samples.chunks(batch_size) {
        let x = user.features.select_rows(chunk)?;
        let y = user.labels.select_rows(chunk)?;
        let g = nn::gradients(model, &x, &y)?;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => a.add_scaled(&g, 1.0)?,
        }
    }
    let mut grads = acc.expect("k ≥ 1");
    if local_batches > 1 {
        grads.scale(1.0 / local_batches as f64);
    }
    Ok(GradientUpdate {
        user: user.id,
        round,
        grads,
        batch_size,
        local_batches,
        samples,
        trapped: false,
    })
}

pub(crate) fn sample_rows(user: &UserNode, batch_size: usize, local_batches: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let need = batch_size * local_batches;
    if batch_size == 0 || local_batches == 0 {
        return Err(config_err!("B and k must be at least 1"));
    }
    if user.len() < need {
        return Err(input_err!("user {} holds {} examples, needs {}", user.id, user.len(), need));
    }
    Ok(index::sample(rng, user.len(), need).into_vec())
}

/// Unweighted mean of the updates' gradients.
pub fn aggregate(updates: &[GradientUpdate]) -> Result<ModelGradients> {
    if updates.is_empty() {
        return Err(input_err!("cannot aggregate an empty update list"));
    }
    ModelGradients::mean(updates.iter().map(|u| &u.grads))
}

/// Server-side manipulation applied to a copy of the central model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "snake_case")]
pub enum Recipe {
    /// Trap weights on dense layer `layer`.
    Trap { layer: usize, trap: TrapConfig },
    /// Forward the input through every earlier parameter layer, then trap
    /// dense layer `layer`.
    ForwardTrap {
        layer: usize,
        trap: TrapConfig,
        #[serde(default)]
        gains: GainMode,
        #[serde(default = "forward_sigma")]
        sigma: f64,
    },
}

fn forward_sigma() -> f64 {
    0.5
}

impl Recipe {
    pub fn target_layer(&self) -> usize {
        match self {
            Recipe::Trap { layer, .. } | Recipe::ForwardTrap { layer, .. } => *layer,
        }
    }
}

/// A model as handed to users, with what the server needs to attack it.
#[derive(Debug, Clone)]
pub struct Dispatched {
    pub model: Model,
    pub plan: Option<ForwardingPlan>,
    pub target_layer: usize,
}

/// Returns a manipulated copy of `model` per `recipe`, or an exact copy when
/// `recipe` is `None`. The original is never touched.
pub fn dispatch_model(model: &Model, recipe: Option<&Recipe>) -> Result<Dispatched> {
    let mut m = model.clone();
    let Some(recipe) = recipe else {
        return Ok(Dispatched {
            target_layer: m.first_dense(),
            model: m,
            plan: None,
        });
    };
    match recipe {
        Recipe::Trap { layer, trap } => {
            init::init_trap_layer(&mut m, *layer, trap, &mut rng::stream(trap.seed, streams::TRAP))?;
            Ok(Dispatched {
                model: m,
                plan: None,
                target_layer: *layer,
            })
        }
        Recipe::ForwardTrap { layer, trap, gains, sigma } => {
            let mut frng = rng::stream(trap.seed, streams::FORWARD);
            let plan = init::init_forwarding(&mut m, *layer, *gains, *sigma, &mut frng)?;
            init::init_trap_layer(&mut m, *layer, trap, &mut rng::stream(trap.seed, streams::TRAP))?;
            Ok(Dispatched {
                model: m,
                plan: Some(plan),
                target_layer: *layer,
            })
        }
    }
}

/// Which users receive which model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Dispatch {
    #[default]
    Honest,
    /// Users listed in `targets` (all users when `None`) get the manipulated
    /// model; the rest get the honest one.
    Malicious {
        recipe: Recipe,
        #[serde(default)]
        targets: Option<Vec<usize>>,
    },
}

/// Read-only view handed to hooks before aggregation.
pub struct RoundView<'a> {
    pub round: usize,
    pub central: &'a Model,
    pub trapped: Option<&'a Dispatched>,
    pub updates: &'a [GradientUpdate],
}

impl RoundView<'_> {
    /// The model a given update was computed on.
    pub fn model_for(&self, update: &GradientUpdate) -> &Model {
        match (update.trapped, self.trapped) {
            (true, Some(d)) => &d.model,
            _ => self.central,
        }
    }
}

/// Observer at the server's vantage point. Hooks cannot alter updates.
pub trait RoundHook {
    fn on_updates(&mut self, view: &RoundView<'_>) -> Result<()>;
}

/// A hook that does nothing.
pub struct NoHook;

impl RoundHook for NoHook {
    fn on_updates(&mut self, _: &RoundView<'_>) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&RoundView<'_>) -> Result<()>> RoundHook for F {
    fn on_updates(&mut self, view: &RoundView<'_>) -> Result<()> {
        self(view)
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub selected: Vec<usize>,
    pub updates: Vec<GradientUpdate>,
    pub aggregate: ModelGradients,
}

/// One protocol round; `seed` fixes user selection, sampling and noise.
///
/// With `lr > 0` the central model takes one SGD step on the aggregate.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    central: &mut Model,
    users: &[UserNode],
    cfg: &RoundConfig,
    dispatch: &Dispatch,
    defense: Option<&DefenseConfig>,
    round: usize,
    seed: u64,
    hook: &mut dyn RoundHook,
) -> Result<RoundOutput> {
    cfg.validate()?;
    if let Some(d) = defense {
        d.validate()?;
    }
    if users.len() < cfg.users_per_round {
        return Err(config_err!("{} users available, {} requested per round", users.len(), cfg.users_per_round));
    }
    let round_seed = rng::derive(seed, round as u64);
    let mut pick = rng::stream(round_seed, streams::USERS);
    let selected = index::sample(&mut pick, users.len(), cfg.users_per_round).into_vec();

    let (trapped, targets) = match dispatch {
        Dispatch::Honest => (None, None),
        Dispatch::Malicious { recipe, targets } => (Some(dispatch_model(central, Some(recipe))?), targets.as_ref()),
    };
    let mut updates = Vec::with_capacity(selected.len());
    for &u in &selected {
        let user = &users[u];
        let is_target = trapped.is_some() && targets.map_or(true, |t| t.contains(&user.id));
        let model = match (&trapped, is_target) {
            (Some(d), true) => &d.model,
            _ => &*central,
        };
        let user_seed = rng::derive(round_seed, user.seed);
        let mut srng = rng::stream(user_seed, streams::SAMPLE);
        let mut nrng = rng::stream(user_seed, streams::NOISE);
        let mut up = match defense {
            Some(d) => defense::defended_local_update(user, model, cfg, d, round, &mut srng, &mut nrng)?,
            None => local_gradients(user, model, cfg.batch_size, cfg.local_batches, round, &mut srng)?,
        };
        up.trapped = is_target;
        updates.push(up);
    }

    hook.on_updates(&RoundView {
        round,
        central,
        trapped: trapped.as_ref(),
        updates: &updates,
    })?;

    let mut agg = aggregate(&updates)?;
    if let Some(d) = defense {
        let mut nrng = rng::stream(round_seed, streams::NOISE);
        defense::server_noise(&mut agg, d, cfg.batch_size, &mut nrng);
    }
    if cfg.lr > 0.0 {
        nn::sgd_step(central, &agg, cfg.lr)?;
    }
    Ok(RoundOutput {
        selected,
        updates,
        aggregate: agg,
    })
}

/// One line of a JSON-lines round transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub round: usize,
    pub seed: u64,
    pub config: RoundConfig,
    pub user: usize,
    pub trapped: bool,
    pub samples: Vec<usize>,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grads: Option<ModelGradients>,
}

/// Hook that appends one [`TranscriptRecord`] per update.
pub struct Transcript<W: Write> {
    out: W,
    seed: u64,
    config: RoundConfig,
    with_gradients: bool,
}

impl<W: Write> Transcript<W> {
    pub fn new(out: W, seed: u64, config: RoundConfig, with_gradients: bool) -> Self {
        Self {
            out,
            seed,
            config,
            with_gradients,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> RoundHook for Transcript<W> {
    fn on_updates(&mut self, view: &RoundView<'_>) -> Result<()> {
        for u in view.updates {
            let rec = TranscriptRecord {
                round: view.round,
                seed: self.seed,
                config: self.config,
                user: u.user,
                trapped: u.trapped,
                samples: u.samples.clone(),
                grad_norm: u.grads.norm(),
                grads: self.with_gradients.then(|| u.grads.clone()),
            };
            serde_json::to_writer(&mut self.out, &rec)?;
            self.out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_transcript(text: &str) -> Result<Vec<TranscriptRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

//! Weight initialization: benign random schemes, trap weights and input
//! forwarding through convolutional and dense layers.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, input_err, Result};
use crate::nn::{Conv2d, Dense, Layer, Model, Padding};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Benign random initializers. Biases are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum RandomScheme {
    Gaussian { sigma: f64 },
    XavierNormal,
    XavierUniform,
}

impl RandomScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RandomScheme::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(config_err!("gaussian sigma must be positive, got {}", sigma))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            RandomScheme::Gaussian { sigma } => format!("gaussian({sigma})"),
            RandomScheme::XavierNormal => "xavier_normal".into(),
            RandomScheme::XavierUniform => "xavier_uniform".into(),
        }
    }

    fn fill(&self, t: &mut Tensor, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let fans = (fan_in + fan_out) as f64;
        match *self {
            RandomScheme::Gaussian { sigma } => {
                let d = Normal::new(0.0, sigma).expect("validated sigma");
                t.data_mut().iter_mut().for_each(|v| *v = d.sample(rng));
            }
            RandomScheme::XavierNormal => {
                let d = Normal::new(0.0, (2.0 / fans).sqrt()).expect("finite std");
                t.data_mut().iter_mut().for_each(|v| *v = d.sample(rng));
            }
            RandomScheme::XavierUniform => {
                let a = (6.0 / fans).sqrt();
                let d = Uniform::new_inclusive(-a, a).expect("finite bound");
                t.data_mut().iter_mut().for_each(|v| *v = d.sample(rng));
            }
        }
    }
}

/// Draws every dense and conv parameter from `scheme`; biases are zeroed.
///
/// Embedding tables are drawn uniform on `[0, 1)` whatever the scheme, so
/// that token inputs reach the first dense layer in the same range as
/// normalized image features.
pub fn init_random(model: &mut Model, scheme: RandomScheme, rng: &mut Rng) -> Result<()> {
    scheme.validate()?;
    for layer in model.layers_mut() {
        match layer {
            Layer::Dense(d) => {
                let (i, o) = (d.in_dim(), d.out_dim());
                scheme.fill(&mut d.weight, i, o, rng);
                d.bias.data_mut().fill(0.0);
            }
            Layer::Conv2d(c) => {
                let kk = c.kernel() * c.kernel();
                let (i, o) = (c.in_channels() * kk, c.out_channels() * kk);
                scheme.fill(&mut c.filters, i, o, rng);
                c.bias.data_mut().fill(0.0);
            }
            Layer::Embedding(e) => {
                e.table.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>());
            }
            Layer::Relu | Layer::Flatten => {}
        }
    }
    Ok(())
}

/// Parameters of one trap-weight row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapConfig {
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "default_trap_sigma")]
    pub sigma: f64,
    /// Scale applied to the positive half.
    pub s: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_trap_sigma() -> f64 {
    0.5
}

impl TrapConfig {
    pub fn new(s: f64, seed: u64) -> Self {
        Self {
            mu: 0.0,
            sigma: default_trap_sigma(),
            s,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(config_err!("trap sigma must be positive, got {}", self.sigma));
        }
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(config_err!("trap scale s must lie in (0, 1), got {}", self.s));
        }
        if !self.mu.is_finite() {
            return Err(config_err!("trap mu must be finite"));
        }
        Ok(())
    }
}

/// One trap-weight row of length `l`.
///
/// `⌊l/2⌋` random positions receive `-|z|`, `z ~ N(mu, sigma)`; the other
/// positions receive those values times `-s` in an independent random
/// order. For odd `l` the one extra positive entry is `s·|z|` for a fresh
/// draw `z`.
pub fn trap_weights_row(l: usize, cfg: &TrapConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if l < 2 {
        return Err(input_err!("trap row needs at least 2 entries, got {}", l));
    }
    cfg.validate()?;
    let normal = Normal::new(cfg.mu, cfg.sigma).expect("validated");
    let half = l / 2;
    let mut idx: Vec<usize> = (0..l).collect();
    idx.shuffle(rng);
    let mut neg: Vec<f64> = (0..half).map(|_| -normal.sample(rng).abs()).collect();
    let mut pos: Vec<f64> = neg.iter().map(|v| -cfg.s * v).collect();
    if l % 2 == 1 {
        pos.push(cfg.s * normal.sample(rng).abs());
    }
    neg.shuffle(rng);
    pos.shuffle(rng);
    let mut row = vec![0.0; l];
    for (&i, v) in idx.iter().zip(neg.iter().chain(&pos)) {
        row[i] = *v;
    }
    Ok(row)
}

/// Trap-initializes every row of dense layer `index`; its bias is zeroed.
pub fn init_trap_layer(model: &mut Model, index: usize, cfg: &TrapConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let d = model
        .dense_mut(index)
        .ok_or_else(|| config_err!("layer {} is not a dense layer", index))?;
    let l = d.in_dim();
    for r in 0..d.out_dim() {
        let row = trap_weights_row(l, cfg, rng)?;
        d.weight.row_mut(r).copy_from_slice(&row);
    }
    d.bias.data_mut().fill(0.0);
    Ok(())
}

/// Carrier assignment of one conv layer: `maps[c]` is the output map that
/// carries input channel `c` of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvCarriers {
    pub layer: usize,
    pub maps: Vec<usize>,
}

/// Carrier assignment of one forwarding dense layer: carried feature `j`
/// leaves through neuron `neurons[j]` multiplied by `gains[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcCarriers {
    pub layer: usize,
    pub neurons: Vec<usize>,
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GainMode {
    /// Every carrier weight is one.
    #[default]
    Unit,
    /// Carrier weights drawn uniform on `[0.5, 2)`.
    Random,
}

/// How the model input travels unchanged to the target dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ForwardingPlan {
    pub conv: Vec<ConvCarriers>,
    pub fc: Vec<FcCarriers>,
}

/// Where one input feature arrives at the target layer and by how much it
/// was scaled on the way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Route {
    pub index: usize,
    pub scale: f64,
}

impl ForwardingPlan {
    pub fn is_empty(&self) -> bool {
        self.conv.is_empty() && self.fc.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.conv {
            check_distinct(&c.maps, "conv carrier maps")?;
        }
        for f in &self.fc {
            check_distinct(&f.neurons, "fc carrier neurons")?;
            if f.gains.len() != f.neurons.len() || f.gains.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
                return Err(config_err!("fc gains must be positive, one per carried feature"));
            }
        }
        Ok(())
    }

    /// Routes of every model-input feature (flattened, row-major) to the
    /// input of the layer right after the last forwarding layer.
    pub fn routes(&self, model: &Model) -> Result<Vec<Route>> {
        let shapes = model.shapes()?;
        let mut routes: Vec<Route> = (0..model.input_len()).map(|i| Route { index: i, scale: 1.0 }).collect();
        // conv layers precede dense ones in every supported stack
        if let Some(last) = self.conv.last() {
            let in_shape = &shapes[last.layer + 1];
            let hw = in_shape[1] * in_shape[2];
            let chans = model.input_shape()[0];
            if last.maps.len() != chans {
                return Err(config_err!("conv plan carries {} channels, input has {}", last.maps.len(), chans));
            }
            for (j, r) in routes.iter_mut().enumerate() {
                let (c, pos) = (j / hw, j % hw);
                r.index = last.maps[c] * hw + pos;
            }
        }
        for f in &self.fc {
            if f.neurons.len() != routes.len() {
                return Err(config_err!("fc plan carries {} features, expected {}", f.neurons.len(), routes.len()));
            }
            for (r, (&n, &g)) in routes.iter_mut().zip(f.neurons.iter().zip(&f.gains)) {
                r.index = n;
                r.scale *= g;
            }
        }
        Ok(routes)
    }

    /// Maps a vector living at the target layer's input back to model-input
    /// space.
    pub fn unmap(&self, routes: &[Route], x: &[f64]) -> Vec<f64> {
        routes.iter().map(|r| x[r.index] / r.scale).collect()
    }
}

fn check_distinct(v: &[usize], what: &str) -> Result<()> {
    let mut s = v.to_vec();
    s.sort_unstable();
    if s.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_err!("{} contain duplicates", what));
    }
    Ok(())
}

fn check_forwarding_conv(c: &Conv2d, carried: usize, index: usize) -> Result<()> {
    if c.stride != 1 || c.padding != Padding::Same {
        return Err(config_err!("conv layer {} must use stride 1 and same padding to forward", index));
    }
    if c.kernel() % 2 == 0 {
        return Err(config_err!("conv layer {} has an even kernel", index));
    }
    if c.out_channels() < carried {
        return Err(config_err!(
            "conv layer {} has {} filters, needs at least {}",
            index,
            c.out_channels(),
            carried
        ));
    }
    Ok(())
}

/// Writes the conv part of `plan` into the model.
///
/// Carrier filters are zero apart from a centre one on the previous carrier
/// map; other filters are `N(0, sigma)`, except in the last conv layer where
/// they are `-|N(0, sigma)|` with bias `-0.01` so their maps die under ReLU.
pub fn init_conv_forwarding(model: &mut Model, plan: &[ConvCarriers], sigma: f64, rng: &mut Rng) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(config_err!("sigma must be positive"));
    }
    let chans = model.input_shape()[0];
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut prev: Vec<usize> = (0..chans).collect();
    for (pi, cc) in plan.iter().enumerate() {
        check_distinct(&cc.maps, "conv carrier maps")?;
        if cc.maps.len() != chans {
            return Err(config_err!("conv plan for layer {} carries {} channels, input has {}", cc.layer, cc.maps.len(), chans));
        }
        let last = pi + 1 == plan.len();
        let Some(Layer::Conv2d(c)) = model.layer_mut(cc.layer) else {
            return Err(config_err!("layer {} is not a conv layer", cc.layer));
        };
        check_forwarding_conv(c, chans, cc.layer)?;
        if let Some(&m) = cc.maps.iter().find(|&&m| m >= c.out_channels()) {
            return Err(config_err!("carrier map {} out of range", m));
        }
        let (k, cin) = (c.kernel(), c.in_channels());
        let per_filter = cin * k * k;
        for f in 0..c.out_channels() {
            let w = &mut c.filters.data_mut()[f * per_filter..(f + 1) * per_filter];
            if let Some(ch) = cc.maps.iter().position(|&m| m == f) {
                w.fill(0.0);
                w[(prev[ch] * k + k / 2) * k + k / 2] = 1.0;
                c.bias.data_mut()[f] = 0.0;
            } else if last {
                w.iter_mut().for_each(|v| *v = -noise.sample(rng).abs());
                c.bias.data_mut()[f] = -0.01;
            } else {
                w.iter_mut().for_each(|v| *v = noise.sample(rng));
                c.bias.data_mut()[f] = 0.0;
            }
        }
        prev = cc.maps.clone();
    }
    Ok(())
}

/// Initializes dense layer `index` to forward the features sitting at
/// `inputs` (indices into its input vector) to random distinct neurons.
///
/// Inputs not listed are assumed dead (always zero) and get `N(0, sigma)`
/// weights; rows of neurons that carry nothing get `-|N(0, sigma)|` and bias
/// `-0.01`.
pub fn init_fc_forwarding(
    model: &mut Model,
    index: usize,
    inputs: &[usize],
    gains: GainMode,
    sigma: f64,
    rng: &mut Rng,
) -> Result<FcCarriers> {
    if !(sigma > 0.0) {
        return Err(config_err!("sigma must be positive"));
    }
    check_distinct(inputs, "carried inputs")?;
    let d = model
        .dense_mut(index)
        .ok_or_else(|| config_err!("layer {} is not a dense layer", index))?;
    fc_forwarding_layer(d, inputs, gains, sigma, rng).map(|(neurons, g)| FcCarriers {
        layer: index,
        neurons,
        gains: g,
    })
}

fn fc_forwarding_layer(
    d: &mut Dense,
    inputs: &[usize],
    gains: GainMode,
    sigma: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (n_in, n_out) = (d.in_dim(), d.out_dim());
    if n_out < inputs.len() {
        return Err(config_err!("dense layer has {} neurons, needs at least {}", n_out, inputs.len()));
    }
    if let Some(&i) = inputs.iter().find(|&&i| i >= n_in) {
        return Err(dim_err!("carried input {} out of range {}", i, n_in));
    }
    let mut order: Vec<usize> = (0..n_out).collect();
    order.shuffle(rng);
    let neurons = order[..inputs.len()].to_vec();
    let g: Vec<f64> = match gains {
        GainMode::Unit => vec![1.0; inputs.len()],
        GainMode::Random => (0..inputs.len()).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut carried = vec![false; n_in];
    inputs.iter().for_each(|&i| carried[i] = true);
    let mut carrier_of = vec![None; n_out];
    for (j, &n) in neurons.iter().enumerate() {
        carrier_of[n] = Some(j);
    }
    for r in 0..n_out {
        let row = d.weight.row_mut(r);
        match carrier_of[r] {
            Some(j) => {
                for (col, w) in row.iter_mut().enumerate() {
                    *w = if carried[col] { 0.0 } else { noise.sample(rng) };
                }
                row[inputs[j]] = g[j];
                d.bias.data_mut()[r] = 0.0;
            }
            None => {
                row.iter_mut().for_each(|w| *w = -noise.sample(rng).abs());
                d.bias.data_mut()[r] = -0.01;
            }
        }
    }
    Ok((neurons, g))
}

/// Builds and applies a forwarding plan for every parameterized layer before
/// dense layer `target`: conv layers carry the input channels on random
/// maps, dense layers carry every feature on random neurons.
///
/// Only `Conv2d`, `Relu`, `Flatten` and `Dense` may precede the target.
/// Forwarding is exact for nonnegative inputs.
pub fn init_forwarding(
    model: &mut Model,
    target: usize,
    gains: GainMode,
    sigma: f64,
    rng: &mut Rng,
) -> Result<ForwardingPlan> {
    if model.dense(target).is_none() {
        return Err(config_err!("target layer {} is not dense", target));
    }
    let mut plan = ForwardingPlan::default();
    let conv_layers: Vec<usize> = (0..target)
        .filter(|&i| matches!(model.layers()[i], Layer::Conv2d(_)))
        .collect();
    for i in 0..target {
        match &model.layers()[i] {
            Layer::Conv2d(_) | Layer::Dense(_) | Layer::Relu | Layer::Flatten => {}
            other => return Err(config_err!("cannot forward through a {} layer", other.name())),
        }
    }
    if !conv_layers.is_empty() {
        let chans = model.input_shape()[0];
        for &i in &conv_layers {
            let Layer::Conv2d(c) = &model.layers()[i] else { unreachable!() };
            check_forwarding_conv(c, chans, i)?;
            let mut maps: Vec<usize> = (0..c.out_channels()).collect();
            maps.shuffle(rng);
            maps.truncate(chans);
            plan.conv.push(ConvCarriers { layer: i, maps });
        }
        init_conv_forwarding(model, &plan.conv, sigma, rng)?;
    }
    for i in 0..target {
        if !matches!(model.layers()[i], Layer::Dense(_)) {
            continue;
        }
        let inputs: Vec<usize> = plan.routes(model)?.iter().map(|r| r.index).collect();
        let fc = init_fc_forwarding(model, i, &inputs, gains, sigma, rng)?;
        plan.fc.push(fc);
    }
    Ok(plan)
}

//! Minimal neural-network engine with explicit forward and backward passes.
//!
//! Activations flow between layers as tensors whose first axis is the batch.
//! Every layer has a hand-written local backward rule; [`backward`] chains
//! them from the loss gradient down to the first parameterized layer.
//!
//! The ReLU subgradient at exactly zero is zero, so a neuron whose
//! pre-activation is `≤ 0` for every batch element yields an all-zero weight
//! row and a zero bias entry.

mod conv;
mod dense;
mod grads;
mod loss;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, Error, Result};
use crate::tensor::Tensor;

pub use conv::Padding;
pub use grads::{LayerGrads, ModelGradients};
pub use loss::{loss, loss_grad, Task};

pub(crate) use loss::softmax_into;

/// Fully-connected layer, `y = W x + b` with `W: [out × in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Zero-initialized layer.
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(dim_err!(
                "dense weight {:?} and bias {:?} disagree",
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// 2-D convolution with filters `[f × c × k × k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub filters: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(in_channels: usize, filters: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            filters: Tensor::zeros(&[filters, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[filters]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.filters.shape()[2]
    }

    fn geometry(&self, c: usize, h: usize, w: usize) -> Result<conv::Geometry> {
        if c != self.in_channels() {
            return Err(dim_err!("conv expects {} channels, got {}", self.in_channels(), c));
        }
        let k = self.kernel();
        let (oh, pad_top) = conv::axis(h, k, self.stride, self.padding)
            .ok_or_else(|| dim_err!("input {}x{} smaller than kernel {}", h, w, k))?;
        let (ow, pad_left) = conv::axis(w, k, self.stride, self.padding)
            .ok_or_else(|| dim_err!("input {}x{} smaller than kernel {}", h, w, k))?;
        Ok(conv::Geometry {
            c_in: c,
            h,
            w,
            f: self.out_channels(),
            k,
            stride: self.stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }
}

/// Token embedding; row `t` of `table` is the vector of token `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize) -> Self {
        Self {
            table: Tensor::zeros(&[vocab, dim]),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    Flatten,
    /// Maps `[B × seq]` token ids to `[B × seq·dim]` concatenated vectors.
    Embedding(Embedding),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Embedding(_) => "embedding",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_) | Layer::Embedding(_))
    }

    /// Per-example output shape for a per-example input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if input != [d.in_dim()] {
                    return Err(dim_err!("dense expects [{}], got {:?}", d.in_dim(), input));
                }
                Ok(vec![d.out_dim()])
            }
            Layer::Conv2d(c) => {
                let [ch, h, w] = input else {
                    return Err(dim_err!("conv2d expects [c, h, w], got {:?}", input));
                };
                let g = c.geometry(*ch, *h, *w)?;
                Ok(vec![g.f, g.oh, g.ow])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Embedding(e) => {
                let [seq] = input else {
                    return Err(dim_err!("embedding expects [seq], got {:?}", input));
                };
                Ok(vec![seq * e.dim()])
            }
        }
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// An ordered layer stack plus its task head.
///
/// Layers are only reachable mutably through [`Model::layer_mut`] /
/// [`Model::layers_mut`], which bump an internal version so that a
/// [`ForwardTrace`] taken before a mutation is rejected by [`backward`].
#[derive(Debug, Serialize, Deserialize)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    task: Task,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    version: u64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            task: self.task,
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers && self.task == other.task
    }
}

impl Model {
    /// `input_shape` is the per-example shape: `[features]`, `[c, h, w]` or
    /// `[seq_len]` for token inputs.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, task: Task) -> Result<Self> {
        let model = Self {
            input_shape,
            layers,
            task,
            id: fresh_id(),
            version: 0,
        };
        model.validate()?;
        Ok(model)
    }

    /// Re-checks shape compatibility; useful after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(dim_err!("invalid input shape {:?}", self.input_shape));
        }
        if !self.layers.iter().any(|l| matches!(l, Layer::Dense(_))) {
            return Err(Error::Config("model needs at least one dense layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Embedding(_) = l {
                if i != 0 {
                    return Err(Error::Config("embedding must be the first layer".into()));
                }
            }
            if let Layer::Conv2d(c) = l {
                if c.stride == 0 {
                    return Err(Error::Config("conv stride must be ≥ 1".into()));
                }
            }
        }
        let shapes = self.shapes()?;
        let out = shapes.last().expect("at least one layer");
        match (self.task, out.as_slice()) {
            (Task::Binary, [1]) => Ok(()),
            (Task::Multiclass, [c]) if *c >= 2 => Ok(()),
            _ => Err(dim_err!("output shape {:?} does not fit task {:?}", out, self.task)),
        }
    }

    /// Per-example shapes at every layer boundary (`layers.len() + 1` entries).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let next = l
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|e| dim_err!("layer {} ({}): {}", i, l.name(), e))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut Layer> {
        self.version += 1;
        self.layers.get_mut(index)
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn dense(&self, index: usize) -> Option<&Dense> {
        match self.layers.get(index)? {
            Layer::Dense(d) => Some(d),
            _ => None,
        }
    }

    pub fn dense_mut(&mut self, index: usize) -> Option<&mut Dense> {
        match self.layer_mut(index)? {
            Layer::Dense(d) => Some(d),
            _ => None,
        }
    }

    /// Index of the first dense layer.
    pub fn first_dense(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Dense(_)))
            .expect("validated model has a dense layer")
    }

    pub fn output_dim(&self) -> usize {
        self.shapes().expect("validated").last().expect("non-empty")[0]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weight.len() + d.bias.len(),
                Layer::Conv2d(c) => c.filters.len() + c.bias.len(),
                Layer::Embedding(e) => e.table.len(),
                _ => 0,
            })
            .sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| -> Vec<&Tensor> {
            match l {
                Layer::Dense(d) => vec![&d.weight, &d.bias],
                Layer::Conv2d(c) => vec![&c.filters, &c.bias],
                Layer::Embedding(e) => vec![&e.table],
                _ => vec![],
            }
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.version += 1;
        self.layers.iter_mut().flat_map(|l| -> Vec<&mut Tensor> {
            match l {
                Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
                Layer::Conv2d(c) => vec![&mut c.filters, &mut c.bias],
                Layer::Embedding(e) => vec![&mut e.table],
                _ => vec![],
            }
        })
    }

    pub fn loss(&self, logits: &Tensor, labels: &Tensor) -> Result<f64> {
        loss(self.task, logits, labels)
    }
}

/// Intermediate values retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    model_id: u64,
    model_version: u64,
    batch: usize,
    /// Input of each layer, with the per-example shape restored.
    inputs: Vec<Tensor>,
    logits: Tensor,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// The input fed to layer `index`.
    pub fn layer_input(&self, index: usize) -> Option<&Tensor> {
        self.inputs.get(index)
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

fn with_batch(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    s
}

/// Runs `batch` (`[B × …]`, per-example size equal to the model input) through
/// the model, returning logits `[B × C]` (`[B × 1]` for binary) and the trace.
pub fn forward(model: &Model, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
    let b = batch.rows();
    if batch.shape().len() < 2 && model.input_len() != 1 {
        return Err(dim_err!("batch must be [B × features], got {:?}", batch.shape()));
    }
    if batch.row_len() != model.input_len() {
        return Err(dim_err!(
            "batch rows hold {} values, model expects {:?}",
            batch.row_len(),
            model.input_shape
        ));
    }
    let shapes = model.shapes()?;
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut x = batch.clone().reshape(&with_batch(b, &model.input_shape))?;
    for (i, layer) in model.layers.iter().enumerate() {
        let out_shape = with_batch(b, &shapes[i + 1]);
        let y = layer_forward(layer, &x, b, &shapes[i], out_shape)?;
        inputs.push(std::mem::replace(&mut x, y));
    }
    let classes = shapes.last().expect("non-empty")[0];
    let logits = x.reshape(&[b, classes])?;
    Ok((
        logits.clone(),
        ForwardTrace {
            model_id: model.id,
            model_version: model.version,
            batch: b,
            inputs,
            logits,
        },
    ))
}

fn layer_forward(layer: &Layer, x: &Tensor, b: usize, in_shape: &[usize], out_shape: Vec<usize>) -> Result<Tensor> {
    let n_out: usize = out_shape.iter().product();
    Ok(match layer {
        Layer::Dense(d) => {
            let mut out = vec![0.0; n_out];
            dense::forward(x.data(), b, d.weight.data(), d.bias.data(), &mut out);
            Tensor::from_parts(out_shape, out)
        }
        Layer::Conv2d(c) => {
            let geo = c.geometry(in_shape[0], in_shape[1], in_shape[2])?;
            let mut out = vec![0.0; n_out];
            conv::forward(&geo, x.data(), b, c.filters.data(), c.bias.data(), &mut out);
            Tensor::from_parts(out_shape, out)
        }
        Layer::Relu => Tensor::from_parts(out_shape, x.data().iter().map(|&v| v.max(0.0)).collect()),
        Layer::Flatten => Tensor::from_parts(out_shape, x.data().to_vec()),
        Layer::Embedding(e) => {
            let dim = e.dim();
            let mut out = Vec::with_capacity(n_out);
            for &t in x.data() {
                if t.fract() != 0.0 || t < 0.0 || t >= e.vocab() as f64 {
                    return Err(input_err!("token id {} outside vocabulary of {}", t, e.vocab()));
                }
                out.extend_from_slice(e.table.row(t as usize));
            }
            debug_assert_eq!(out.len(), b * in_shape[0] * dim);
            Tensor::from_parts(out_shape, out)
        }
    })
}

/// Batch-averaged gradients of the loss w.r.t. every parameter.
pub fn backward(model: &Model, trace: &ForwardTrace, labels: &Tensor) -> Result<ModelGradients> {
    let grads = backward_impl(model, trace, labels, None)?;
    Ok(ModelGradients { layers: grads })
}

/// Weight and bias gradients of dense layer `index` alone. Backpropagation
/// stops at that layer and no other parameter gradient is materialized; the
/// values equal those in the full [`gradients`].
pub fn dense_gradients(model: &Model, batch: &Tensor, labels: &Tensor, index: usize) -> Result<(Tensor, Tensor)> {
    if model.dense(index).is_none() {
        return Err(Error::Config(format!("layer {index} is not a dense layer")));
    }
    let (_, trace) = forward(model, batch)?;
    let mut grads = backward_impl(model, &trace, labels, Some(index))?;
    match grads.swap_remove(index) {
        LayerGrads::Dense { weight, bias } => Ok((weight, bias)),
        _ => unreachable!("checked to be dense"),
    }
}

fn backward_impl(model: &Model, trace: &ForwardTrace, labels: &Tensor, only: Option<usize>) -> Result<Vec<LayerGrads>> {
    if trace.model_id != model.id || trace.model_version != model.version {
        return Err(Error::State(
            "forward trace was recorded on a different or since-modified model".into(),
        ));
    }
    if trace.inputs.len() != model.layers.len() {
        return Err(Error::State("forward trace does not match the layer stack".into()));
    }
    let b = trace.batch;
    let shapes = model.shapes()?;
    let mut g = loss_grad(model.task, &trace.logits, labels)?;
    let first_param = only.unwrap_or_else(|| model.layers.iter().position(Layer::has_params).unwrap_or(0));
    let mut grads = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate().rev() {
        if i < first_param {
            grads.push(LayerGrads::None);
            continue;
        }
        let x = &trace.inputs[i];
        let need_dx = i > first_param;
        let (lg, dx) = if only.is_some_and(|o| o != i) && layer.has_params() {
            (LayerGrads::None, layer_input_grad(layer, x, &g, b, &shapes[i])?)
        } else {
            layer_backward(layer, x, &g, b, &shapes[i], need_dx)?
        };
        grads.push(lg);
        if let Some(dx) = dx {
            g = dx;
        }
    }
    grads.reverse();
    Ok(grads)
}

/// Input gradient of a parameter layer without its parameter gradients.
fn layer_input_grad(layer: &Layer, x: &Tensor, g: &Tensor, b: usize, in_shape: &[usize]) -> Result<Option<Tensor>> {
    match layer {
        Layer::Dense(d) => {
            let mut dx = vec![0.0; x.len()];
            dense::backward_input(g.data(), b, d.weight.data(), d.out_dim(), &mut dx);
            Ok(Some(Tensor::from_parts(with_batch(b, in_shape), dx)))
        }
        _ => Ok(layer_backward(layer, x, g, b, in_shape, true)?.1),
    }
}

fn layer_backward(
    layer: &Layer,
    x: &Tensor,
    g: &Tensor,
    b: usize,
    in_shape: &[usize],
    need_dx: bool,
) -> Result<(LayerGrads, Option<Tensor>)> {
    let in_batch_shape = with_batch(b, in_shape);
    Ok(match layer {
        Layer::Dense(d) => {
            let mut dw = vec![0.0; d.weight.len()];
            let mut db = vec![0.0; d.bias.len()];
            dense::backward_params(x.data(), g.data(), b, &mut dw, &mut db);
            let dx = need_dx.then(|| {
                let mut dx = vec![0.0; x.len()];
                dense::backward_input(g.data(), b, d.weight.data(), d.out_dim(), &mut dx);
                Tensor::from_parts(in_batch_shape, dx)
            });
            (
                LayerGrads::Dense {
                    weight: Tensor::from_parts(d.weight.shape().to_vec(), dw),
                    bias: Tensor::from_parts(d.bias.shape().to_vec(), db),
                },
                dx,
            )
        }
        Layer::Conv2d(c) => {
            let geo = c.geometry(in_shape[0], in_shape[1], in_shape[2])?;
            let mut df = vec![0.0; c.filters.len()];
            let mut db = vec![0.0; c.bias.len()];
            let mut dx = need_dx.then(|| vec![0.0; x.len()]);
            conv::backward(
                &geo,
                x.data(),
                g.data(),
                b,
                c.filters.data(),
                &mut df,
                &mut db,
                dx.as_deref_mut(),
            );
            (
                LayerGrads::Conv2d {
                    filters: Tensor::from_parts(c.filters.shape().to_vec(), df),
                    bias: Tensor::from_parts(c.bias.shape().to_vec(), db),
                },
                dx.map(|d| Tensor::from_parts(in_batch_shape, d)),
            )
        }
        Layer::Relu => {
            let dx = need_dx.then(|| {
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                Tensor::from_parts(in_batch_shape, d)
            });
            (LayerGrads::None, dx)
        }
        Layer::Flatten => {
            let dx = need_dx.then(|| Tensor::from_parts(in_batch_shape, g.data().to_vec()));
            (LayerGrads::None, dx)
        }
        Layer::Embedding(e) => {
            let dim = e.dim();
            let mut dt = vec![0.0; e.table.len()];
            for (pos, &t) in x.data().iter().enumerate() {
                let src = &g.data()[pos * dim..(pos + 1) * dim];
                let dst = &mut dt[t as usize * dim..(t as usize + 1) * dim];
                crate::tensor::axpy(1.0, src, dst);
            }
            (
                LayerGrads::Embedding {
                    table: Tensor::from_parts(e.table.shape().to_vec(), dt),
                },
                None,
            )
        }
    })
}

/// Forward then backward on one batch.
pub fn gradients(model: &Model, batch: &Tensor, labels: &Tensor) -> Result<ModelGradients> {
    let (_, trace) = forward(model, batch)?;
    backward(model, &trace, labels)
}

/// Calls `f(i, grads_i)` with the gradient of each batch row in turn, without
/// holding more than one per-example gradient set in memory.
pub fn for_each_example_gradient(
    model: &Model,
    batch: &Tensor,
    labels: &Tensor,
    mut f: impl FnMut(usize, ModelGradients) -> Result<()>,
) -> Result<()> {
    let b = batch.rows();
    if labels.rows() != b {
        return Err(dim_err!("{} labels for a batch of {}", labels.rows(), b));
    }
    for i in 0..b {
        let xi = batch.select_rows(&[i])?;
        let yi = labels.select_rows(&[i])?;
        f(i, gradients(model, &xi, &yi)?)?;
    }
    Ok(())
}

/// One gradient set per batch row; their mean equals [`backward`] on the batch.
pub fn per_example_gradients(model: &Model, batch: &Tensor, labels: &Tensor) -> Result<Vec<ModelGradients>> {
    let mut out = Vec::with_capacity(batch.rows());
    for_each_example_gradient(model, batch, labels, |_, g| {
        out.push(g);
        Ok(())
    })?;
    Ok(out)
}

/// `θ ← θ − lr · g` for every parameter.
pub fn sgd_step(model: &mut Model, grads: &ModelGradients, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(input_err!("learning rate must be positive, got {}", lr));
    }
    if !grads.matches(model) {
        return Err(dim_err!("gradients do not match model parameters"));
    }
    for (p, g) in model.params_mut().zip(grads.tensors()) {
        p.add_scaled(g, -lr)?;
    }
    Ok(())
}

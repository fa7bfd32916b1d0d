use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, Result};
use crate::tensor::Tensor;

use super::{Layer, Model};

/// Gradients of one layer's parameters, mirroring [`Layer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerGrads {
    None,
    Dense { weight: Tensor, bias: Tensor },
    Conv2d { filters: Tensor, bias: Tensor },
    Embedding { table: Tensor },
}

impl LayerGrads {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerGrads::None => vec![],
            LayerGrads::Dense { weight, bias } => vec![weight, bias],
            LayerGrads::Conv2d { filters, bias } => vec![filters, bias],
            LayerGrads::Embedding { table } => vec![table],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerGrads::None => vec![],
            LayerGrads::Dense { weight, bias } => vec![weight, bias],
            LayerGrads::Conv2d { filters, bias } => vec![filters, bias],
            LayerGrads::Embedding { table } => vec![table],
        }
    }

    fn zeros_for(layer: &Layer) -> Self {
        match layer {
            Layer::Dense(d) => LayerGrads::Dense {
                weight: Tensor::zeros(d.weight.shape()),
                bias: Tensor::zeros(d.bias.shape()),
            },
            Layer::Conv2d(c) => LayerGrads::Conv2d {
                filters: Tensor::zeros(c.filters.shape()),
                bias: Tensor::zeros(c.bias.shape()),
            },
            Layer::Embedding(e) => LayerGrads::Embedding {
                table: Tensor::zeros(e.table.shape()),
            },
            Layer::Relu | Layer::Flatten => LayerGrads::None,
        }
    }
}

/// Per-layer parameter gradients, shape-matched to a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGradients {
    pub layers: Vec<LayerGrads>,
}

impl ModelGradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model.layers().iter().map(LayerGrads::zeros_for).collect(),
        }
    }

    /// Weight and bias gradients of dense layer `index`.
    pub fn dense(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        match self.layers.get(index)? {
            LayerGrads::Dense { weight, bias } => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut())
    }

    /// Total number of gradient entries.
    pub fn len(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global L2 norm over every entry.
    pub fn norm(&self) -> f64 {
        self.tensors().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors_mut().for_each(|t| t.scale(factor));
    }

    pub fn same_shape(&self, other: &ModelGradients) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.shape() == b.shape())
            && self.tensors().count() == other.tensors().count()
    }

    /// True when every tensor matches the corresponding parameter of `model`.
    pub fn matches(&self, model: &Model) -> bool {
        self.same_shape(&ModelGradients::zeros_like(model))
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ModelGradients, factor: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(dim_err!("gradient sets have different shapes"));
        }
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_scaled(b, factor)?;
        }
        Ok(())
    }

    /// Unweighted elementwise mean.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a ModelGradients>) -> Result<Self> {
        let mut iter = items.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| input_err!("mean of an empty gradient list"))?;
        let mut acc = first.clone();
        let mut n = 1usize;
        for g in iter {
            acc.add_scaled(g, 1.0)?;
            n += 1;
        }
        acc.scale(1.0 / n as f64);
        Ok(acc)
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &ModelGradients) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(dim_err!("gradient sets have different shapes"));
        }
        let mut m: f64 = 0.0;
        for (a, b) in self.tensors().zip(other.tensors()) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }
}

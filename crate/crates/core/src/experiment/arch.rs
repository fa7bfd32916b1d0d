use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::error::{config_err, Result};
use crate::fl::Recipe;
use crate::init::{GainMode, TrapConfig};
use crate::nn::{Conv2d, Dense, Embedding, Layer, Model, Padding, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// Six dense layers: `N, 3000, 3000, 2000, 1000, classes`.
    Fcnn,
    /// Two 3×3 convs (128, 256 filters), then dense `N` and the head.
    Cnn,
    /// Embedding, dense `N`, ReLU, one logit.
    Text,
    /// One hidden dense layer of width `N`.
    Mlp,
}

impl std::str::FromStr for ArchKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcnn" => Ok(Self::Fcnn),
            "cnn" => Ok(Self::Cnn),
            "text" => Ok(Self::Text),
            "mlp" => Ok(Self::Mlp),
            _ => Err(config_err!("unknown architecture {:?}", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Width of the first dense layer.
    pub neurons: usize,
    /// Multiplier on every other hidden width.
    #[serde(default = "unit")]
    pub width: f64,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn unit() -> f64 {
    1.0
}

fn default_embed_dim() -> usize {
    250
}

impl ArchSpec {
    pub fn new(kind: ArchKind, neurons: usize) -> Self {
        Self {
            kind,
            neurons,
            width: 1.0,
            embed_dim: default_embed_dim(),
        }
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(1)
    }

    pub fn build(&self, data: &DatasetKind, classes: usize) -> Result<Model> {
        if self.neurons == 0 || !(self.width > 0.0) {
            return Err(config_err!("architecture widths must be positive"));
        }
        let n = self.neurons;
        let dense = |i, o| Layer::Dense(Dense::new(i, o));
        let shape = data.example_shape();
        let len = data.example_len();
        match (self.kind, *data) {
            (ArchKind::Text, DatasetKind::Tokens { seq_len, vocab }) => Model::new(
                vec![seq_len],
                vec![
                    Layer::Embedding(Embedding::new(vocab, self.embed_dim)),
                    dense(seq_len * self.embed_dim, n),
                    Layer::Relu,
                    dense(n, 1),
                ],
                Task::Binary,
            ),
            (ArchKind::Text, _) => Err(config_err!("the text model needs a token dataset")),
            (_, DatasetKind::Tokens { .. }) => Err(config_err!("token datasets need the text model")),
            (ArchKind::Fcnn, _) => {
                let w: Vec<usize> = [3000, 3000, 2000, 1000].iter().map(|&b| self.scaled(b)).collect();
                let mut layers = vec![dense(len, n), Layer::Relu];
                let mut prev = n;
                for &h in &w {
                    layers.push(dense(prev, h));
                    layers.push(Layer::Relu);
                    prev = h;
                }
                layers.push(dense(prev, classes));
                Model::new(vec![len], layers, Task::Multiclass)
            }
            (ArchKind::Mlp, _) => Model::new(vec![len], vec![dense(len, n), Layer::Relu, dense(n, classes)], Task::Multiclass),
            (ArchKind::Cnn, DatasetKind::Image { height, width, channels }) => {
                let (f1, f2) = (self.scaled(128), self.scaled(256));
                Model::new(
                    shape,
                    vec![
                        Layer::Conv2d(Conv2d::new(channels, f1, 3, 1, Padding::Same)),
                        Layer::Relu,
                        Layer::Conv2d(Conv2d::new(f1, f2, 3, 1, Padding::Same)),
                        Layer::Relu,
                        Layer::Flatten,
                        dense(f2 * height * width, n),
                        Layer::Relu,
                        dense(n, classes),
                    ],
                    Task::Multiclass,
                )
            }
            (ArchKind::Cnn, _) => Err(config_err!("the CNN needs an image dataset")),
        }
    }
}

/// The recipe a malicious server uses on `model`: trap weights on the first
/// dense layer, with input forwarding when conv layers come first.
pub fn trap_recipe(model: &Model, trap: TrapConfig) -> Recipe {
    let layer = model.first_dense();
    if model.layers()[..layer].iter().any(|l| matches!(l, Layer::Conv2d(_) | Layer::Dense(_))) {
        Recipe::ForwardTrap {
            layer,
            trap,
            gains: GainMode::Unit,
            sigma: 0.5,
        }
    } else {
        Recipe::Trap { layer, trap }
    }
}

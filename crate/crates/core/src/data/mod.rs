//! Datasets, IDX/PGM codecs and metrics files.

mod idx;
mod metrics;
mod pgm;
mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, Result};
use crate::fl::UserNode;
use crate::tensor::Tensor;

pub use idx::{load_mnist_dir, load_mnist_idx, read_idx, read_idx_file, write_idx, write_idx_file, IdxArray};
pub use metrics::{mean_metrics, read_metrics_csv, write_metrics, write_trace_csv, MetricsFormat, MetricsRow};
pub use pgm::{encode_pgm, to_byte, write_pgm, write_reconstruction_grid, GRAY};
pub use synthetic::gen_synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    Image { height: usize, width: usize, channels: usize },
    Tabular { features: usize },
    Tokens { seq_len: usize, vocab: usize },
}

impl DatasetKind {
    /// Per-example shape as the model sees it: `[c, h, w]`, `[d]` or `[seq]`.
    pub fn example_shape(&self) -> Vec<usize> {
        match *self {
            DatasetKind::Image {
                height,
                width,
                channels,
            } => vec![channels, height, width],
            DatasetKind::Tabular { features } => vec![features],
            DatasetKind::Tokens { seq_len, .. } => vec![seq_len],
        }
    }

    pub fn example_len(&self) -> usize {
        self.example_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.example_shape().contains(&0) {
            return Err(dim_err!("dataset dimensions must be positive: {:?}", self));
        }
        if let DatasetKind::Tokens { vocab: 0, .. } = self {
            return Err(dim_err!("vocabulary must be non-empty"));
        }
        Ok(())
    }
}

/// Features are `[n × example_len]` (channel-planar for images); labels are
/// class indices `[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub kind: DatasetKind,
    pub features: Tensor,
    pub labels: Tensor,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, kind: DatasetKind, features: Tensor, labels: Tensor, classes: usize) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            kind,
            features,
            labels,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if self.features.shape().len() != 2 || self.features.row_len() != self.kind.example_len() {
            return Err(dim_err!(
                "features {:?} do not hold {} values per example",
                self.features.shape(),
                self.kind.example_len()
            ));
        }
        if self.labels.shape() != [self.features.rows()] {
            return Err(dim_err!("labels {:?} for {} examples", self.labels.shape(), self.features.rows()));
        }
        if self.classes < 2 {
            return Err(dim_err!("need at least two classes"));
        }
        if self
            .labels
            .data()
            .iter()
            .any(|&y| y < 0.0 || y.fract() != 0.0 || y >= self.classes as f64)
        {
            return Err(input_err!("labels must be integers in [0, {})", self.classes));
        }
        let ok = match self.kind {
            DatasetKind::Tokens { vocab, .. } => self
                .features
                .data()
                .iter()
                .all(|&t| t >= 0.0 && t.fract() == 0.0 && t < vocab as f64),
            _ => self.features.data().iter().all(|v| (0.0..=1.0).contains(v)),
        };
        if !ok {
            return Err(input_err!("features out of range for {:?}", self.kind));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example_shape(&self) -> Vec<usize> {
        self.kind.example_shape()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            name: self.name.clone(),
            kind: self.kind,
            features: self.features.select_rows(idx)?,
            labels: self.labels.select_rows(idx)?,
            classes: self.classes,
        })
    }

    /// Wraps the dataset as one FL user.
    pub fn into_user(self, id: usize, seed: u64) -> Result<UserNode> {
        match self.kind {
            DatasetKind::Tokens { vocab, .. } => UserNode::tokens(id, self.features, self.labels, vocab, seed),
            _ => UserNode::new(id, self.features, self.labels, seed),
        }
    }
}

/// Resolves a dataset spec: `mnist` (bundled subset), `mnist:<dir>`, or a
/// synthetic spec (`image:HxWxC`, `tabular:D`, `tokens:SEQxVOCAB`) of `n`
/// examples.
pub fn load_dataset(spec: &str, default_mnist_dir: &Path, n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    let (head, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let dims = |arg: &str, parts: usize| -> Result<Vec<usize>> {
        let v: std::result::Result<Vec<usize>, _> = arg.split('x').map(str::parse).collect();
        match v {
            Ok(v) if v.len() == parts => Ok(v),
            _ => Err(crate::error::config_err!("bad dataset spec {:?}", spec)),
        }
    };
    match head {
        "mnist" if arg.is_empty() => load_mnist_dir(default_mnist_dir),
        "mnist" => load_mnist_dir(Path::new(arg)),
        "image" => {
            let d = dims(arg, 3)?;
            gen_synthetic(
                DatasetKind::Image {
                    height: d[0],
                    width: d[1],
                    channels: d[2],
                },
                n,
                classes,
                seed,
            )
        }
        "tabular" => gen_synthetic(DatasetKind::Tabular { features: dims(arg, 1)?[0] }, n, classes, seed),
        "tokens" => {
            let d = dims(arg, 2)?;
            gen_synthetic(
                DatasetKind::Tokens {
                    seq_len: d[0],
                    vocab: d[1],
                },
                n,
                2,
                seed,
            )
        }
        _ => Err(crate::error::config_err!("unknown dataset {:?}", spec)),
    }
}

use rand::Rng as _;

use crate::error::{dim_err, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

use super::{Dataset, DatasetKind};

/// Uniform `[0, 1)` features (or uniform token ids) with uniform labels.
/// Token datasets are binary regardless of `classes`.
pub fn gen_synthetic(kind: DatasetKind, n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    kind.validate()?;
    if n == 0 {
        return Err(dim_err!("synthetic dataset needs at least one example"));
    }
    let mut r = rng::stream(seed, streams::DATA);
    let d = kind.example_len();
    let (features, classes, name) = match kind {
        DatasetKind::Tokens { vocab, .. } => (
            Tensor::from_fn(&[n, d], |_| r.random_range(0..vocab) as f64),
            2,
            "synthetic-tokens",
        ),
        DatasetKind::Image { .. } => (Tensor::from_fn(&[n, d], |_| r.random::<f64>()), classes, "synthetic-image"),
        DatasetKind::Tabular { .. } => (Tensor::from_fn(&[n, d], |_| r.random::<f64>()), classes, "synthetic-tabular"),
    };
    if classes < 2 {
        return Err(dim_err!("need at least two classes"));
    }
    let labels = Tensor::new(vec![n], (0..n).map(|_| r.random_range(0..classes) as f64).collect())?;
    Dataset::new(name, kind, features, labels, classes)
}

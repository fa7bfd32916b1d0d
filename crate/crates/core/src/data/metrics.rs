use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MetricsFormat {
    #[default]
    Csv,
    Json,
}

/// One run's result. `s` and `sigma` are empty when not applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub dataset: String,
    pub s: Option<f64>,
    pub sigma: Option<f64>,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub wallclock_ms: f64,
}

pub const HEADER: &str = "seed,dataset,s,sigma,B,N,k,A,P,R,wallclock_ms";

pub fn write_metrics(rows: &[MetricsRow], path: &Path, format: MetricsFormat) -> Result<()> {
    match format {
        MetricsFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
            w.write_record(HEADER.split(','))?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        MetricsFormat::Json => fs::write(path, serde_json::to_vec_pretty(rows)?)?,
    }
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Mean `(A, P, R)` over rows; `None` when empty.
pub fn mean_metrics(rows: &[MetricsRow]) -> Option<(f64, f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let sum = rows
        .iter()
        .fold((0.0, 0.0, 0.0), |s, r| (s.0 + r.a, s.1 + r.p, s.2 + r.r));
    Some((sum.0 / n, sum.1 / n, sum.2 / n))
}

/// `iteration,loss` per line.
pub fn write_trace_csv(losses: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

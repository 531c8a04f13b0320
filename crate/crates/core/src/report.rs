//! Fixed-schema CSV + JSON tables built from metric records and analytics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mean_std, Metric, MetricRecord};
use crate::store::atomic_write;
use crate::train::RegimeTag;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Verdicts,
    Curves,
    Similarity,
    Census,
    Surfaces,
}

impl ReportKind {
    pub const ALL: [ReportKind; 5] = [
        Self::Verdicts,
        Self::Curves,
        Self::Similarity,
        Self::Census,
        Self::Surfaces,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Verdicts => "verdicts",
            Self::Curves => "curves",
            Self::Similarity => "similarity",
            Self::Census => "census",
            Self::Surfaces => "surfaces",
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown report kind {s:?}")))
    }
}

/// One aggregated point of an accuracy curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub sparsity: f64,
    pub regime: RegimeTag,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
}

/// Mean and std over seeds of every (sparsity, regime, metric) group, in
/// increasing sparsity, then regime, then metric order.
pub fn curve_rows(records: &[MetricRecord]) -> Vec<CurveRow> {
    let mut keys: Vec<(f64, RegimeTag)> = records.iter().map(|r| (r.sparsity, r.regime)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keys.dedup();
    let mut rows = Vec::new();
    for (s, regime) in keys {
        for metric in [Metric::Sa, Metric::Ra] {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.sparsity == s && r.regime == regime)
                .map(|r| r.get(metric))
                .collect();
            let (mean, std) = mean_std(&vals);
            rows.push(CurveRow {
                sparsity: s,
                regime,
                metric,
                mean,
                std,
            });
        }
    }
    rows
}

pub fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

/// Writes `rows` to `stem.csv` and `stem.json`. `header` is only used when
/// there are no rows.
pub fn write_table<T: Serialize>(rows: &[T], stem: &Path, header: &[&str]) -> Result<[std::path::PathBuf; 2]> {
    let csv_path = stem.with_extension("csv");
    let json_path = stem.with_extension("json");
    atomic_write(&csv_path, &csv_bytes(rows, header)?)?;
    atomic_write(&json_path, &serde_json::to_vec_pretty(rows)?)?;
    Ok([csv_path, json_path])
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeRow {
    pub pretrain: String,
    pub method: String,
    pub task: String,
    pub fraction: f64,
    pub extreme_sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub level: u32,
    pub sparsity: f64,
    pub a: String,
    pub b: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusRow {
    pub mask: String,
    pub sparsity: f64,
    pub tensor: String,
    pub stage: usize,
    pub zero_kernels: usize,
    pub total_kernels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub key: String,
    pub file: String,
    pub resolution: usize,
    pub attacked: bool,
    pub batch_id: String,
    pub center_loss: f64,
    pub min_loss: f64,
    pub max_loss: f64,
}

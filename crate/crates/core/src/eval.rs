//! Clean and robust accuracy, and the matching / double-win verdicts.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attack::{perturb, AttackConfig, Classifier};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::mask::PruneMethod;
use crate::model::Provenance;
use crate::seed;
use crate::tensor::Tensor;
use crate::train::RegimeTag;

pub const EVAL_BATCH: usize = 256;
pub const MIN_SEEDS: usize = 3;

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}

fn check_nonempty(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(invalid!("empty evaluation set"));
    }
    Ok(())
}

fn check_head(logits: &Tensor<f32>, ds: &Dataset) -> Result<()> {
    if logits.shape()[1] != ds.num_classes() {
        return Err(Error::shape(
            "evaluate",
            format!("{} logits for {} classes", logits.shape()[1], ds.num_classes()),
        ));
    }
    Ok(())
}

pub fn standard_accuracy<C: Classifier<f32> + ?Sized>(net: &C, ds: &Dataset) -> Result<f64> {
    standard_accuracy_batched(net, ds, EVAL_BATCH)
}

pub fn standard_accuracy_batched<C: Classifier<f32> + ?Sized>(
    net: &C,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    check_nonempty(ds)?;
    let mut correct = 0;
    for (x, y) in ds.chunks(batch_size) {
        let logits = net.logits(&x)?;
        check_head(&logits, ds)?;
        correct += count_correct(&logits, &y);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// White-box accuracy: each batch is attacked against `net` itself.
pub fn robust_accuracy<C: Classifier<f32> + ?Sized>(
    net: &C,
    ds: &Dataset,
    cfg: &AttackConfig,
    seed_value: u64,
) -> Result<f64> {
    transfer_attack_accuracy(net, net, ds, cfg, seed_value)
}

/// Accuracy of `target` on perturbations crafted against `surrogate`.
pub fn transfer_attack_accuracy<T, S>(
    target: &T,
    surrogate: &S,
    ds: &Dataset,
    cfg: &AttackConfig,
    seed_value: u64,
) -> Result<f64>
where
    T: Classifier<f32> + ?Sized,
    S: Classifier<f32> + ?Sized,
{
    check_nonempty(ds)?;
    cfg.validate()?;
    let mut correct = 0;
    for (b, (x, y)) in ds.chunks(EVAL_BATCH).enumerate() {
        let s = seed::substream(seed_value, &format!("eval/batch{b}"));
        let adv = perturb(surrogate, &x, &y, cfg, s)?.apply(&x);
        let logits = target.logits(&adv)?;
        check_head(&logits, ds)?;
        correct += count_correct(&logits, &y);
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "RA")]
    Ra,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sa => "SA",
            Self::Ra => "RA",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One evaluated transfer run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub pretrain: Provenance,
    /// `None` for the dense model.
    pub method: Option<PruneMethod>,
    pub sparsity: f64,
    pub regime: RegimeTag,
    pub data_fraction: f64,
    pub seed: u64,
    #[serde(rename = "SA")]
    pub sa: f64,
    #[serde(rename = "RA")]
    pub ra: f64,
}

impl MetricRecord {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Sa => self.sa,
            Metric::Ra => self.ra,
        }
    }
}

/// Mean and sample standard deviation (n − 1). Values are summed in sorted
/// order so the result does not depend on input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub regime: RegimeTag,
    pub runs: usize,
    pub sa_mean: f64,
    pub sa_std: f64,
    pub ra_mean: f64,
    pub ra_std: f64,
}

impl BaselineStats {
    /// From dense records of one regime, at least three of them.
    pub fn from_records(records: &[MetricRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| invalid!("no baseline records"))?;
        if records.len() < MIN_SEEDS {
            return Err(invalid!("baseline needs {MIN_SEEDS} runs, got {}", records.len()));
        }
        if records.iter().any(|r| r.regime != first.regime) {
            return Err(invalid!("baseline records mix regimes"));
        }
        if records.iter().any(|r| r.sparsity != 0.0) {
            return Err(invalid!("baseline records must be dense"));
        }
        let sa: Vec<f64> = records.iter().map(|r| r.sa).collect();
        let ra: Vec<f64> = records.iter().map(|r| r.ra).collect();
        let (sa_mean, sa_std) = mean_std(&sa);
        let (ra_mean, ra_std) = mean_std(&ra);
        Ok(Self {
            regime: first.regime,
            runs: records.len(),
            sa_mean,
            sa_std,
            ra_mean,
            ra_std,
        })
    }

    pub fn mean(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Sa => self.sa_mean,
            Metric::Ra => self.ra_mean,
        }
    }

    pub fn std(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Sa => self.sa_std,
            Metric::Ra => self.ra_std,
        }
    }
}

/// `mean(sub) ≥ mean(base) − std(base)`, inclusive.
pub fn matching_verdict(sub: &[MetricRecord], base: &BaselineStats, metric: Metric) -> Result<bool> {
    if sub.len() < MIN_SEEDS {
        return Err(invalid!("verdict needs {MIN_SEEDS} seeds, got {}", sub.len()));
    }
    let values: Vec<f64> = sub.iter().map(|r| r.get(metric)).collect();
    let (mean, _) = mean_std(&values);
    Ok(mean >= base.mean(metric) - base.std(metric))
}

/// Dense baselines per transfer regime.
pub type Baselines = BTreeMap<RegimeTag, BaselineStats>;

pub fn baselines_from(records: &[MetricRecord]) -> Result<Baselines> {
    let mut by: BTreeMap<RegimeTag, Vec<MetricRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.sparsity == 0.0) {
        by.entry(r.regime).or_default().push(r.clone());
    }
    by.into_iter()
        .map(|(k, v)| Ok((k, BaselineStats::from_records(&v)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoubleWin {
    pub st_sa: bool,
    pub at_sa: bool,
    pub at_ra: bool,
}

impl DoubleWin {
    pub fn holds(&self) -> bool {
        self.st_sa && self.at_sa && self.at_ra
    }
}

fn family(records: &[MetricRecord], regime: RegimeTag) -> Result<Vec<MetricRecord>> {
    let f: Vec<MetricRecord> = records.iter().filter(|r| r.regime == regime).cloned().collect();
    if f.is_empty() {
        return Err(Error::MissingInputs(vec![format!("{regime} transfer records")]));
    }
    Ok(f)
}

fn baseline(baselines: &Baselines, regime: RegimeTag) -> Result<&BaselineStats> {
    baselines
        .get(&regime)
        .ok_or_else(|| Error::MissingInputs(vec![format!("{regime} dense baseline")]))
}

/// Matching on ST-SA, AT-SA and AT-RA. ST-RA plays no part.
pub fn double_win_components(records: &[MetricRecord], baselines: &Baselines) -> Result<DoubleWin> {
    let st = family(records, RegimeTag::St)?;
    let at = family(records, RegimeTag::At)?;
    let (bst, bat) = (baseline(baselines, RegimeTag::St)?, baseline(baselines, RegimeTag::At)?);
    Ok(DoubleWin {
        st_sa: matching_verdict(&st, bst, Metric::Sa)?,
        at_sa: matching_verdict(&at, bat, Metric::Sa)?,
        at_ra: matching_verdict(&at, bat, Metric::Ra)?,
    })
}

pub fn double_win_verdict(records: &[MetricRecord], baselines: &Baselines) -> Result<bool> {
    Ok(double_win_components(records, baselines)?.holds())
}

/// One sparsity level of a verdict table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub sparsity: f64,
    #[serde(rename = "ST_SA_mean")]
    pub st_sa_mean: f64,
    #[serde(rename = "ST_SA_std")]
    pub st_sa_std: f64,
    #[serde(rename = "AT_SA_mean")]
    pub at_sa_mean: f64,
    #[serde(rename = "AT_SA_std")]
    pub at_sa_std: f64,
    #[serde(rename = "AT_RA_mean")]
    pub at_ra_mean: f64,
    #[serde(rename = "AT_RA_std")]
    pub at_ra_std: f64,
    #[serde(rename = "ST_SA_matching")]
    pub st_sa_matching: bool,
    #[serde(rename = "AT_SA_matching")]
    pub at_sa_matching: bool,
    #[serde(rename = "AT_RA_matching")]
    pub at_ra_matching: bool,
    pub double_win: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictCurve {
    rows: Vec<VerdictRow>,
}

impl VerdictCurve {
    pub fn new(rows: Vec<VerdictRow>) -> Result<Self> {
        if rows.windows(2).any(|w| w[0].sparsity >= w[1].sparsity) {
            return Err(invalid!("verdict levels must be strictly increasing"));
        }
        Ok(Self { rows })
    }

    /// Groups sparse records (one pruning lineage) by level and judges each
    /// level against the dense baselines.
    pub fn build(records: &[MetricRecord], baselines: &Baselines) -> Result<Self> {
        let mut levels: Vec<f64> = records
            .iter()
            .filter(|r| r.sparsity > 0.0)
            .map(|r| r.sparsity)
            .collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut rows = Vec::with_capacity(levels.len());
        for s in levels {
            let at_level: Vec<MetricRecord> = records.iter().filter(|r| r.sparsity == s).cloned().collect();
            let dw = double_win_components(&at_level, baselines)?;
            let st = family(&at_level, RegimeTag::St)?;
            let at = family(&at_level, RegimeTag::At)?;
            let (st_sa_mean, st_sa_std) = mean_std(&st.iter().map(|r| r.sa).collect::<Vec<_>>());
            let (at_sa_mean, at_sa_std) = mean_std(&at.iter().map(|r| r.sa).collect::<Vec<_>>());
            let (at_ra_mean, at_ra_std) = mean_std(&at.iter().map(|r| r.ra).collect::<Vec<_>>());
            rows.push(VerdictRow {
                sparsity: s,
                st_sa_mean,
                st_sa_std,
                at_sa_mean,
                at_sa_std,
                at_ra_mean,
                at_ra_std,
                st_sa_matching: dw.st_sa,
                at_sa_matching: dw.at_sa,
                at_ra_matching: dw.at_ra,
                double_win: dw.holds(),
            });
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> &[VerdictRow] {
        &self.rows
    }

    pub fn levels(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.sparsity).collect()
    }

    pub fn verdicts(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.double_win).collect()
    }
}

/// Largest level of the leading run of double-win levels; 0.0 when the first
/// level already fails.
pub fn extreme_sparsity(curve: &VerdictCurve) -> f64 {
    curve
        .rows
        .iter()
        .take_while(|r| r.double_win)
        .last()
        .map_or(0.0, |r| r.sparsity)
}

//! Global magnitude pruning, rewinding, the IMP loop, and the one-shot and
//! random baselines.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::mask::{Mask, PruneMethod};
use crate::model::{Model, ParamRegistry, ParamSet, Provenance};
use crate::seed;
use crate::train::{train, RegimeTag, TrainConfig};

/// Fraction of remaining weights removed per IMP round.
pub const IMP_RATE: f64 = 0.2;

const SLACK: f64 = 1e-9;

pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + SLACK).floor().max(0.0) as usize
}

/// Kept weight reference used for ranking.
struct Entry<'a> {
    mag: f32,
    name: &'a str,
    index: usize,
}

fn rank(a: &Entry, b: &Entry) -> Ordering {
    a.mag
        .total_cmp(&b.mag)
        .then_with(|| a.name.cmp(b.name))
        .then_with(|| a.index.cmp(&b.index))
}

fn kept_entries<'a>(weights: &'a BTreeMap<String, crate::tensor::Tensor<f32>>, mask: &'a Mask) -> Result<Vec<Entry<'a>>> {
    let mut out = Vec::with_capacity(mask.kept());
    for (name, bits) in mask.tensors() {
        let w = weights
            .get(name)
            .ok_or_else(|| Error::MaskMismatch(format!("weights lack masked tensor {name}")))?;
        if w.numel() != bits.len() {
            return Err(Error::MaskMismatch(format!(
                "{name}: {} bits for {} weights",
                bits.len(),
                w.numel()
            )));
        }
        for (index, (&v, &keep)) in w.data().iter().zip(bits).enumerate() {
            if keep {
                out.push(Entry {
                    mag: v.abs(),
                    name,
                    index,
                });
            }
        }
    }
    Ok(out)
}

/// Removes the `count` smallest kept entries from a copy of `mask`. Returns
/// the new bits and the largest removed magnitude.
fn cut(
    weights: &BTreeMap<String, crate::tensor::Tensor<f32>>,
    mask: &Mask,
    count: usize,
) -> Result<(BTreeMap<String, Vec<bool>>, f32)> {
    let mut entries = kept_entries(weights, mask)?;
    entries.sort_unstable_by(rank);
    let mut bits: BTreeMap<String, Vec<bool>> =
        mask.tensors().map(|(n, b)| (n.to_owned(), b.to_vec())).collect();
    let mut threshold = 0.0f32;
    for e in &entries[..count.min(entries.len())] {
        bits.get_mut(e.name).expect("entry from mask")[e.index] = false;
        threshold = threshold.max(e.mag);
    }
    Ok((bits, threshold))
}

/// Prunes `round_half_up(rate · remaining)` (at least one) of the currently
/// kept weights, smallest |w| first across all tensors; ties go to the lower
/// (tensor name, flat index).
pub fn global_magnitude_prune(params: &ParamSet, mask: &Mask, rate: f64) -> Result<Mask> {
    Ok(global_magnitude_prune_logged(params, mask, rate)?.0)
}

fn global_magnitude_prune_logged(params: &ParamSet, mask: &Mask, rate: f64) -> Result<(Mask, f32)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(invalid!("prune rate {rate} outside (0, 1)"));
    }
    let remaining = mask.kept();
    if remaining == 0 {
        return Err(invalid!("nothing left to prune"));
    }
    let count = round_half_up(rate * remaining as f64).clamp(1, remaining);
    let (bits, threshold) = cut(params.tensors(), mask, count)?;
    Ok((mask.with_bits(bits, mask.round() + 1), threshold))
}

/// Kept positions take their anchor values, pruned positions become exactly
/// zero, unprunable tensors are copied from the anchor. The mask must come
/// from the same pre-training as the anchor unless it is a random mask.
pub fn rewind_weights(params: &ParamSet, mask: &Mask) -> Result<ParamSet> {
    if mask.provenance() != Provenance::Random && mask.provenance() != params.provenance() {
        return Err(Error::ProvenanceMismatch {
            mask: mask.provenance().to_string(),
            anchor: params.provenance().to_string(),
        });
    }
    let mut tensors = params.anchor().clone();
    for (name, bits) in mask.tensors() {
        let t = tensors
            .get_mut(name)
            .ok_or_else(|| Error::MaskMismatch(format!("anchor lacks {name}")))?;
        if t.numel() != bits.len() {
            return Err(Error::MaskMismatch(format!(
                "{name}: {} bits for {} weights",
                bits.len(),
                t.numel()
            )));
        }
        for (v, &k) in t.data_mut().iter_mut().zip(bits) {
            if !k {
                *v = 0.0;
            }
        }
    }
    params.with_tensors(tensors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRoundLog {
    pub round: u32,
    pub sparsity_before: f64,
    pub sparsity_after: f64,
    pub threshold_magnitude: f64,
    pub retrain_loss: f64,
    #[serde(rename = "retrain_val_SA")]
    pub retrain_val_sa: Option<f64>,
    #[serde(rename = "retrain_val_RA")]
    pub retrain_val_ra: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ImpOutcome {
    /// Mask after each round, round 1 first.
    pub masks: Vec<Mask>,
    pub logs: Vec<PruneRoundLog>,
}

pub fn imp_method(regime: RegimeTag) -> Result<PruneMethod> {
    match regime {
        RegimeTag::St => Ok(PruneMethod::ImpSt),
        RegimeTag::At => Ok(PruneMethod::ImpAt),
        RegimeTag::Fat => Err(invalid!("IMP retrains with ST or AT only")),
    }
}

/// `rounds` iterations of rewind → retrain on the source task → prune 20%.
pub fn imp_run(
    model: &Model,
    anchor: &ParamSet,
    rounds: u32,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
) -> Result<ImpOutcome> {
    let method = imp_method(cfg.regime.tag)?;
    let start = Mask::full(model.registry(), method, anchor.provenance());
    let mut masks = Vec::new();
    let mut logs = Vec::new();
    imp_continue(model, anchor, start, rounds, cfg, train_ds, val_ds, |m, l| {
        masks.push(m.clone());
        logs.push(l.clone());
        Ok(())
    })?;
    Ok(ImpOutcome { masks, logs })
}

/// IMP from an existing mask up to round `until`, reporting each new mask.
#[allow(clippy::too_many_arguments)]
pub fn imp_continue<F>(
    model: &Model,
    anchor: &ParamSet,
    start: Mask,
    until: u32,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    mut on_round: F,
) -> Result<Mask>
where
    F: FnMut(&Mask, &PruneRoundLog) -> Result<()>,
{
    if until < 1 {
        return Err(invalid!("IMP needs at least one round"));
    }
    let method = imp_method(cfg.regime.tag)?;
    if start.method() != method {
        return Err(invalid!("mask method {} but retraining implies {method}", start.method()));
    }
    start.check_covers(model.registry())?;
    let mut mask = start;
    while mask.round() < until {
        let round = mask.round() + 1;
        let rewound = rewind_weights(anchor, &mask)?;
        let mut rc = cfg.clone();
        rc.seed = seed::substream(cfg.seed, &format!("imp/round{round}"));
        let out = train(model, rewound, Some(&mask), train_ds, val_ds, &rc)?;
        let last = out.log.last().expect("at least one epoch");
        let before = mask.sparsity();
        let (next, threshold) = global_magnitude_prune_logged(&out.params, &mask, IMP_RATE)?;
        let log = PruneRoundLog {
            round,
            sparsity_before: before,
            sparsity_after: next.sparsity(),
            threshold_magnitude: threshold as f64,
            retrain_loss: last.train_loss,
            retrain_val_sa: last.val_sa,
            retrain_val_ra: last.val_ra,
        };
        on_round(&next, &log)?;
        mask = next;
    }
    Ok(mask)
}

/// Sparsity after `k` rounds of 20% pruning over `total` weights, using the
/// same integer rule as the IMP loop.
pub fn imp_ladder(total: usize, k: u32) -> f64 {
    let mut remaining = total;
    for _ in 0..k {
        if remaining == 0 {
            break;
        }
        remaining -= round_half_up(IMP_RATE * remaining as f64).clamp(1, remaining);
    }
    1.0 - remaining as f64 / total as f64
}

/// Number of IMP rounds whose ladder sparsity is closest to `target`.
pub fn rounds_for_sparsity(target: f64) -> u32 {
    ((1.0 - target).ln() / (1.0 - IMP_RATE).ln()).round().max(1.0) as u32
}

/// One global cut on the anchor keeping `round_half_up((1 − s) · N)` weights.
pub fn one_shot_prune(anchor: &ParamSet, registry: &ParamRegistry, target_sparsity: f64) -> Result<Mask> {
    if !(target_sparsity > 0.0 && target_sparsity < 1.0) {
        return Err(invalid!("target sparsity {target_sparsity} outside (0, 1)"));
    }
    let full = Mask::full(registry, PruneMethod::Omp, anchor.provenance());
    let total = full.total();
    let keep = round_half_up((1.0 - target_sparsity) * total as f64).min(total);
    let (bits, _) = cut(anchor.anchor(), &full, total - keep)?;
    Ok(full.with_bits(bits, 0))
}

/// Every prunable tensor loses `round_half_up(s · n)` weights chosen
/// uniformly without replacement.
pub fn random_prune(seed_value: u64, target_sparsity: f64, registry: &ParamRegistry) -> Result<Mask> {
    if !(target_sparsity > 0.0 && target_sparsity < 1.0) {
        return Err(invalid!("target sparsity {target_sparsity} outside (0, 1)"));
    }
    let mut bits = BTreeMap::new();
    for name in registry.prunable() {
        let n = registry.numel(name);
        let prune = round_half_up(target_sparsity * n as f64).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seed::stream(seed_value, &format!("random-prune/{name}")));
        let mut b = vec![true; n];
        for &i in &idx[..prune] {
            b[i] = false;
        }
        bits.insert(name.clone(), b);
    }
    Ok(Mask::new(bits, 0, PruneMethod::Rp, Provenance::Random))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(values: &[f32]) -> (ParamSet, Mask) {
        let mut t = BTreeMap::new();
        t.insert("w".to_owned(), Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        let mut b = BTreeMap::new();
        b.insert("w".to_owned(), vec![true; values.len()]);
        (ParamSet::new(t), Mask::new(b, 0, PruneMethod::ImpSt, Provenance::Random))
    }

    #[test]
    fn prunes_smallest_then_next() {
        let (p, m) = single(&[0.5, -0.1, 0.3, -0.7, 0.2]);
        let m1 = global_magnitude_prune(&p, &m, 0.2).unwrap();
        assert_eq!(m1.get("w").unwrap(), &[true, false, true, true, true]);
        let m2 = global_magnitude_prune(&p, &m1, 0.2).unwrap();
        assert_eq!(m2.get("w").unwrap(), &[true, false, true, true, false]);
        assert_eq!(m2.round(), 2);
    }

    #[test]
    fn tie_prunes_earlier_index() {
        let (p, m) = single(&[0.2, -0.2, 0.9, 0.9, 0.9]);
        let m1 = global_magnitude_prune(&p, &m, 0.2).unwrap();
        assert_eq!(m1.get("w").unwrap(), &[false, true, true, true, true]);
    }

    #[test]
    fn exhausted_mask_errors() {
        let (p, _) = single(&[1.0]);
        let mut b = BTreeMap::new();
        b.insert("w".to_owned(), vec![false]);
        let empty = Mask::new(b, 3, PruneMethod::ImpSt, Provenance::Random);
        assert!(global_magnitude_prune(&p, &empty, 0.2).is_err());
    }

    #[test]
    fn ladder_levels() {
        for (k, want) in [(6, 0.7379), (10, 0.8926), (16, 0.9719)] {
            assert!((imp_ladder(5832, k) - want).abs() < 0.001, "k={k}");
        }
        assert_eq!(rounds_for_sparsity(0.8926), 10);
        assert_eq!(rounds_for_sparsity(0.488), 3);
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up(0.5), 1);
        assert_eq!(round_half_up(2.4999), 2);
        assert_eq!(round_half_up((1.0 - 0.7379) * 10_000.0), 2621);
    }
}

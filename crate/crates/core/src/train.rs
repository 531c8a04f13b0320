//! Standard, adversarial and fast-adversarial training loops.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{perturb, AttackConfig};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::eval::{robust_accuracy, standard_accuracy};
use crate::mask::Mask;
use crate::model::{Model, ParamSet, Provenance};
use crate::optim::{sgd_step, LrSchedule, OptimState};
use crate::seed;
use crate::store::atomic_write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegimeTag {
    #[serde(rename = "ST")]
    St,
    #[serde(rename = "AT")]
    At,
    #[serde(rename = "FAT")]
    Fat,
}

impl RegimeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::St => "ST",
            Self::At => "AT",
            Self::Fat => "FAT",
        }
    }

    pub fn provenance(self) -> Provenance {
        match self {
            Self::St => Provenance::Std,
            Self::At => Provenance::At,
            Self::Fat => Provenance::Fat,
        }
    }
}

impl fmt::Display for RegimeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ST" | "STD" => Ok(Self::St),
            "AT" => Ok(Self::At),
            "FAT" => Ok(Self::Fat),
            _ => Err(Error::Config(format!("unknown training regime {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRegime {
    pub tag: RegimeTag,
    pub attack: Option<AttackConfig>,
}

impl TrainRegime {
    pub fn standard() -> Self {
        Self {
            tag: RegimeTag::St,
            attack: None,
        }
    }

    /// PGD adversarial training with `steps` inner iterations.
    pub fn adversarial(steps: usize) -> Self {
        Self {
            tag: RegimeTag::At,
            attack: Some(AttackConfig::pgd(steps)),
        }
    }

    pub fn fast() -> Self {
        Self {
            tag: RegimeTag::Fat,
            attack: Some(AttackConfig::fast()),
        }
    }

    /// Canonical regime for a tag: PGD-10 for AT.
    pub fn from_tag(tag: RegimeTag) -> Self {
        match tag {
            RegimeTag::St => Self::standard(),
            RegimeTag::At => Self::adversarial(10),
            RegimeTag::Fat => Self::fast(),
        }
    }

    pub fn is_adversarial(&self) -> bool {
        self.tag != RegimeTag::St
    }

    pub fn validate(&self) -> Result<()> {
        match (self.tag, &self.attack) {
            (RegimeTag::St, None) => Ok(()),
            (RegimeTag::St, Some(_)) => Err(invalid!("ST takes no attack")),
            (_, None) => Err(invalid!("{} needs an attack config", self.tag)),
            (RegimeTag::At, Some(a)) => {
                a.validate()?;
                if a.steps < 1 {
                    return Err(invalid!("AT needs at least one PGD step"));
                }
                Ok(())
            }
            (RegimeTag::Fat, Some(a)) => {
                a.validate()?;
                if a.steps != 1 || !a.random_init {
                    return Err(invalid!("FAT is one step from a random start"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub regime: TrainRegime,
    /// Adversary for per-epoch validation RA under AT/FAT.
    pub val_attack: AttackConfig,
}

impl TrainConfig {
    /// Downstream fine-tuning: 40 epochs, lr 0.1 decayed ×0.1 at 20 and 30.
    pub fn downstream(regime: TrainRegime, seed: u64) -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            schedule: LrSchedule::step_decay(0.1, vec![20, 30], 40),
            weight_decay: 5e-4,
            momentum: 0.9,
            seed,
            regime,
            val_attack: AttackConfig::pgd(10),
        }
    }

    /// IMP retraining: 10 epochs at a fixed lr of 5e-4.
    pub fn imp_retrain(regime: TrainRegime, seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            schedule: LrSchedule::constant(5e-4, 10),
            weight_decay: 1e-4,
            momentum: 0.9,
            seed,
            regime,
            val_attack: AttackConfig::pgd(10),
        }
    }

    /// Same recipe squeezed into `epochs`, milestones scaled proportionally.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let old = self.schedule.total_epochs.max(1);
        let mut ms: Vec<usize> = self
            .schedule
            .milestones
            .iter()
            .map(|&m| (m * epochs).div_ceil(old))
            .filter(|&m| m > 0 && m < epochs)
            .collect();
        ms.dedup();
        self.schedule.milestones = ms;
        self.schedule.total_epochs = epochs;
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid!("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be >= 1"));
        }
        if self.schedule.total_epochs != self.epochs {
            return Err(invalid!(
                "schedule spans {} epochs, config trains {}",
                self.schedule.total_epochs,
                self.epochs
            ));
        }
        self.schedule.validate()?;
        self.regime.validate()?;
        self.val_attack.validate()
    }
}

/// One row of the per-epoch log. `snapshot` indexes `TrainOutcome::snapshots`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "val_SA")]
    pub val_sa: Option<f64>,
    #[serde(rename = "val_RA")]
    pub val_ra: Option<f64>,
    #[serde(skip)]
    pub snapshot: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<CheckpointMeta>,
    /// Weights at the end of each epoch.
    pub snapshots: Vec<ParamSet>,
    /// Forward+backward passes through the network, including attack steps.
    pub backward_passes: usize,
}

impl TrainOutcome {
    pub fn snapshot(&self, meta: &CheckpointMeta) -> &ParamSet {
        &self.snapshots[meta.snapshot]
    }

    /// Weights at the early-stopping choice for `regime`.
    pub fn early_stopped(&self, regime: RegimeTag) -> Result<&ParamSet> {
        Ok(self.snapshot(early_stop_select(&self.log, regime)?))
    }
}

/// Trains `params` (masked positions held at zero) on `train_ds`.
pub fn train(
    model: &Model,
    params: ParamSet,
    mask: Option<&Mask>,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_params(&params)?;
    if train_ds.is_empty() {
        return Err(invalid!("empty training set"));
    }
    for ds in std::iter::once(train_ds).chain(val_ds) {
        if ds.num_classes() != model.num_classes() {
            return Err(invalid!(
                "{} has {} classes, model head has {}",
                ds.name(),
                ds.num_classes(),
                model.num_classes()
            ));
        }
    }
    let mut params = match mask {
        Some(m) => {
            m.check_covers(model.registry())?;
            params.masked(m)
        }
        None => params,
    };
    let mut state = OptimState::new(&params, 0.0, cfg.momentum as f32, cfg.weight_decay as f32)?;
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    let mut passes = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        state.lr = lr as f32;
        let mut rng = seed::stream(cfg.seed, &format!("shuffle/epoch{epoch}"));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_ds.batch(idx);
            let x = match &cfg.regime.attack {
                Some(atk) => {
                    let net = model.subnetwork(&params, mask);
                    let s = seed::substream(cfg.seed, &format!("attack/epoch{epoch}/step{step}"));
                    let p = perturb(&net, &x, &y, atk, s)?;
                    passes += p.grad_evals;
                    p.apply(&x)
                }
                None => x,
            };
            let (loss, grads) = model.loss_and_param_grads(&params, mask, &x, &y)?;
            passes += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    loss: loss as f64,
                });
            }
            loss_sum += loss as f64 * idx.len() as f64;
            sgd_step(&mut params, &grads, &mut state, mask)?;
        }
        let (val_sa, val_ra) = match val_ds {
            Some(v) => {
                let net = model.subnetwork(&params, mask);
                let sa = standard_accuracy(&net, v)?;
                let ra = if cfg.regime.is_adversarial() {
                    let s = seed::substream(cfg.seed, &format!("val/epoch{epoch}"));
                    Some(robust_accuracy(&net, v, &cfg.val_attack, s)?)
                } else {
                    None
                };
                (Some(sa), ra)
            }
            None => (None, None),
        };
        log.push(CheckpointMeta {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_ds.len() as f64,
            val_sa,
            val_ra,
            snapshot: snapshots.len(),
        });
        snapshots.push(params.clone());
    }
    Ok(TrainOutcome {
        params,
        log,
        snapshots,
        backward_passes: passes,
    })
}

/// Best validation RA for AT/FAT, best validation SA for ST; earliest epoch
/// on ties. Falls back to the last entry when the metric was not recorded.
pub fn early_stop_select(log: &[CheckpointMeta], regime: RegimeTag) -> Result<&CheckpointMeta> {
    let last = log.last().ok_or_else(|| invalid!("empty training log"))?;
    let metric = |m: &CheckpointMeta| match regime {
        RegimeTag::St => m.val_sa,
        _ => m.val_ra,
    };
    let mut best: Option<(&CheckpointMeta, f64)> = None;
    for m in log {
        if let Some(v) = metric(m) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((m, v));
            }
        }
    }
    Ok(best.map_or(last, |(m, _)| m))
}

/// Trains a dense model on the source task and freezes the chosen weights as
/// the rewind anchor, tagged with the regime's provenance.
pub fn pretrain_source(
    model: &Model,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainOutcome)> {
    let tag = cfg.regime.tag;
    let init = model.init(seed::substream(cfg.seed, &format!("pretrain/{tag}/init")));
    let outcome = train(model, init, None, train_ds, val_ds, cfg)?;
    let mut chosen = outcome.early_stopped(tag)?.clone();
    chosen.freeze_anchor(tag.provenance())?;
    Ok((chosen, outcome))
}

/// CSV with columns epoch, lr, train_loss, val_SA, val_RA.
pub fn write_train_log(log: &[CheckpointMeta], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in log {
        w.serialize(m)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(epoch: usize, ra: f64) -> CheckpointMeta {
        CheckpointMeta {
            epoch,
            lr: 0.1,
            train_loss: 0.0,
            val_sa: Some(0.9),
            val_ra: Some(ra),
            snapshot: epoch - 1,
        }
    }

    #[test]
    fn early_stop_argmax_and_ties() {
        let log = vec![meta(1, 0.40), meta(2, 0.45), meta(3, 0.43)];
        assert_eq!(early_stop_select(&log, RegimeTag::At).unwrap().epoch, 2);
        let tie = vec![meta(1, 0.45), meta(2, 0.45)];
        assert_eq!(early_stop_select(&tie, RegimeTag::Fat).unwrap().epoch, 1);
        assert_eq!(early_stop_select(&log[..1], RegimeTag::At).unwrap().epoch, 1);
        // all SA equal → earliest
        assert_eq!(early_stop_select(&log, RegimeTag::St).unwrap().epoch, 1);
        assert!(early_stop_select(&[], RegimeTag::St).is_err());
    }

    #[test]
    fn regime_invariants() {
        assert!(TrainRegime::standard().validate().is_ok());
        assert!(TrainRegime::adversarial(3).validate().is_ok());
        assert!(TrainRegime::fast().validate().is_ok());
        let bad = TrainRegime {
            tag: RegimeTag::Fat,
            attack: Some(AttackConfig::pgd(3)),
        };
        assert!(bad.validate().is_err());
        let bad = TrainRegime {
            tag: RegimeTag::St,
            attack: Some(AttackConfig::pgd(3)),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scaled_recipe_keeps_milestone_ratios() {
        let c = TrainConfig::downstream(TrainRegime::standard(), 0).with_epochs(12);
        assert_eq!(c.schedule.milestones, vec![6, 9]);
        c.validate().unwrap();
    }
}

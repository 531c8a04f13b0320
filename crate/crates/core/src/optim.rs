//! SGD with momentum and L2 weight decay, plus learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mask::Mask;
use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl OptimState {
    pub fn new(params: &ParamSet, lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid!("momentum {momentum} outside [0, 1)"));
        }
        if weight_decay < 0.0 {
            return Err(invalid!("negative weight decay {weight_decay}"));
        }
        let velocity = params
            .iter()
            .map(|(n, t)| (n.to_owned(), Tensor::zeros(t.shape())))
            .collect();
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity,
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<f32>> {
        self.velocity.get(name)
    }
}

/// One update: `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`, then `w ← w ⊙ m`.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimState,
    mask: Option<&Mask>,
) -> Result<()> {
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    for (name, w) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| invalid!("no gradient for {name}"))?;
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| invalid!("no velocity for {name}"))?;
        if g.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{name}: weight {:?}, grad {:?}, velocity {:?}",
                    w.shape(),
                    g.shape(),
                    v.shape()
                ),
            ));
        }
        let bits = mask.and_then(|m| m.get(name));
        if let Some(b) = bits {
            if b.len() != w.numel() {
                return Err(Error::MaskMismatch(format!("{name}: {} bits", b.len())));
            }
        }
        for (i, ((wv, vv), &gv)) in w
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(g.data())
            .enumerate()
        {
            *vv = mu * *vv + (gv + wd * *wv);
            *wv -= lr * *vv;
            if let Some(b) = bits {
                if !b[i] {
                    *wv = 0.0;
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    StepDecay,
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn constant(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            base_lr,
            milestones: Vec::new(),
            total_epochs,
        }
    }

    pub fn step_decay(base_lr: f64, milestones: Vec<usize>, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::StepDecay,
            base_lr,
            milestones,
            total_epochs,
        }
    }

    pub fn cosine(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            base_lr,
            milestones: Vec::new(),
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(invalid!("schedule needs at least one epoch"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!("milestones {:?} not strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_epochs) {
            return Err(invalid!(
                "milestone {:?} not below {} epochs",
                self.milestones.last(),
                self.total_epochs
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(invalid!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            ));
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::StepDecay => {
                let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
                self.base_lr * 0.1f64.powi(passed as i32)
            }
            ScheduleKind::Cosine => {
                self.base_lr * 0.5 * (1.0 + (PI * epoch as f64 / self.total_epochs as f64).cos())
            }
        })
    }
}

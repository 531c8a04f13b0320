//! Experiment configuration: a sectioned TOML document of typed keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::data::{SynthParams, TaskKind};
use crate::error::{Error, Result};
use crate::eval::MIN_SEEDS;
use crate::mask::PruneMethod;
use crate::model::ModelConfig;
use crate::optim::{LrSchedule, ScheduleKind};
use crate::train::{RegimeTag, TrainConfig, TrainRegime};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub root_seed: u64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            width: m.width,
            depth: m.depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source_per_class: usize,
    pub downstream: Vec<TaskKind>,
    pub downstream_per_class: usize,
    pub test_per_class: usize,
    pub val_fraction: f64,
    pub fractions: Vec<f64>,
    pub noise_sigma: f64,
    pub jitter: f64,
    pub rotation: f64,
    pub scale_spread: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthParams::default();
        Self {
            source_per_class: 100,
            downstream: vec![TaskKind::DownstreamA],
            downstream_per_class: 100,
            test_per_class: 50,
            val_fraction: 0.05,
            fractions: vec![1.0],
            noise_sigma: s.noise_sigma,
            jitter: s.jitter,
            rotation: s.rotation,
            scale_spread: s.scale_spread,
            contrast_min: s.contrast_min,
            contrast_max: s.contrast_max,
        }
    }
}

impl DataSection {
    pub fn synth(&self) -> SynthParams {
        SynthParams {
            noise_sigma: self.noise_sigma,
            jitter: self.jitter,
            rotation: self.rotation,
            scale_spread: self.scale_spread,
            contrast_min: self.contrast_min,
            contrast_max: self.contrast_max,
        }
    }
}

/// Optimizer recipe shared by the pretrain, retrain and transfer sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub milestones: Vec<usize>,
    pub weight_decay: f64,
    pub momentum: f64,
    /// PGD steps when the regime is AT.
    pub at_steps: usize,
}

/// Recipe keys as written in a section; absent keys fall back to the
/// section's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeKeys {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub schedule: Option<ScheduleKind>,
    pub milestones: Option<Vec<usize>>,
    pub weight_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub at_steps: Option<usize>,
}

impl RecipeKeys {
    pub fn resolve(&self, base: &Recipe) -> Recipe {
        Recipe {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            lr: self.lr.unwrap_or(base.lr),
            schedule: self.schedule.unwrap_or(base.schedule),
            milestones: self.milestones.clone().unwrap_or_else(|| base.milestones.clone()),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            momentum: self.momentum.unwrap_or(base.momentum),
            at_steps: self.at_steps.unwrap_or(base.at_steps),
        }
    }

    pub fn from_recipe(r: &Recipe) -> Self {
        Self {
            epochs: Some(r.epochs),
            batch_size: Some(r.batch_size),
            lr: Some(r.lr),
            schedule: Some(r.schedule),
            milestones: Some(r.milestones.clone()),
            weight_decay: Some(r.weight_decay),
            momentum: Some(r.momentum),
            at_steps: Some(r.at_steps),
        }
    }
}

impl Recipe {
    fn from_train(c: &TrainConfig, at_steps: usize) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.schedule.base_lr,
            schedule: c.schedule.kind,
            milestones: c.schedule.milestones.clone(),
            weight_decay: c.weight_decay,
            momentum: c.momentum,
            at_steps,
        }
    }

    pub fn regime(&self, tag: RegimeTag, attack: &AttackSection) -> TrainRegime {
        match tag {
            RegimeTag::St => TrainRegime::standard(),
            RegimeTag::At => TrainRegime {
                tag,
                attack: Some(AttackConfig {
                    epsilon: attack.eps,
                    alpha: attack.alpha,
                    steps: self.at_steps,
                    random_init: attack.random_init,
                }),
            },
            RegimeTag::Fat => TrainRegime {
                tag,
                attack: Some(AttackConfig::fast().with_epsilon(attack.eps)),
            },
        }
    }

    pub fn train_config(&self, tag: RegimeTag, attack: &AttackSection, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                kind: self.schedule,
                base_lr: self.lr,
                milestones: self.milestones.clone(),
                total_epochs: self.epochs,
            },
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            seed,
            regime: self.regime(tag, attack),
            val_attack: attack.val_config(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub regimes: Vec<RegimeTag>,
    #[serde(flatten)]
    pub keys: RecipeKeys,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            regimes: vec![RegimeTag::St, RegimeTag::At],
            keys: RecipeKeys::default(),
        }
    }
}

impl PretrainSection {
    pub fn base() -> Recipe {
        Recipe {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            schedule: ScheduleKind::StepDecay,
            milestones: vec![10, 15],
            weight_decay: 5e-4,
            momentum: 0.9,
            at_steps: 5,
        }
    }

    pub fn recipe(&self) -> Recipe {
        self.keys.resolve(&Self::base())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub methods: Vec<PruneMethod>,
    /// IMP rounds to run.
    pub rounds: u32,
    /// Ladder levels (IMP rounds) whose masks are transferred; empty means
    /// every round.
    #[serde(default)]
    pub levels: Vec<u32>,
    /// Levels at which the one-shot and random baselines are built; empty
    /// means the same as `levels`.
    #[serde(default)]
    pub baseline_levels: Vec<u32>,
    /// Source-task retraining recipe inside each IMP round.
    pub retrain: RecipeKeys,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            methods: vec![PruneMethod::ImpSt, PruneMethod::Rp],
            rounds: 2,
            levels: Vec::new(),
            baseline_levels: Vec::new(),
            retrain: RecipeKeys::default(),
        }
    }
}

impl PruneSection {
    pub fn base() -> Recipe {
        Recipe::from_train(&TrainConfig::imp_retrain(TrainRegime::standard(), 0), 3)
    }

    pub fn retrain_recipe(&self) -> Recipe {
        self.retrain.resolve(&Self::base())
    }

    pub fn levels(&self) -> Vec<u32> {
        if self.levels.is_empty() {
            (1..=self.rounds).collect()
        } else {
            self.levels.clone()
        }
    }

    pub fn baseline_levels(&self) -> Vec<u32> {
        if self.baseline_levels.is_empty() {
            self.levels()
        } else {
            self.baseline_levels.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferSection {
    pub regimes: Vec<RegimeTag>,
    #[serde(flatten)]
    pub keys: RecipeKeys,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            regimes: vec![RegimeTag::St, RegimeTag::At],
            keys: RecipeKeys::default(),
        }
    }
}

impl TransferSection {
    /// Downstream recipe squeezed to 12 epochs.
    pub fn base() -> Recipe {
        let t = TrainConfig::downstream(TrainRegime::standard(), 0).with_epochs(12);
        Recipe {
            batch_size: 64,
            ..Recipe::from_train(&t, 5)
        }
    }

    pub fn recipe(&self) -> Recipe {
        self.keys.resolve(&Self::base())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub eps: f64,
    pub alpha: f64,
    pub random_init: bool,
    /// Steps of the reporting adversary.
    pub eval_steps: usize,
    /// Steps of the per-epoch validation adversary.
    pub val_steps: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            eps: AttackConfig::EPS,
            alpha: AttackConfig::ALPHA,
            random_init: true,
            eval_steps: 20,
            val_steps: 10,
        }
    }
}

impl AttackSection {
    fn with_steps(&self, steps: usize) -> AttackConfig {
        AttackConfig {
            epsilon: self.eps,
            alpha: self.alpha,
            steps,
            random_init: self.random_init,
        }
    }

    pub fn eval_config(&self) -> AttackConfig {
        self.with_steps(self.eval_steps)
    }

    pub fn val_config(&self) -> AttackConfig {
        self.with_steps(self.val_steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsSection {
    pub similarity: bool,
    pub census: bool,
    /// Odd grid resolution; 0 disables loss surfaces.
    pub surface_resolution: usize,
    pub surface_batch: usize,
    pub surface_attacked: bool,
    pub surface_reattack: bool,
    pub trajectory: bool,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        Self {
            similarity: true,
            census: true,
            surface_resolution: 0,
            surface_batch: 512,
            surface_attacked: false,
            surface_reattack: false,
            trajectory: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub analytics: AnalyticsSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg: Self = table.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.normalize();
        let known = toml::Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        check_keys(&table, &known, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes every defaulted recipe key out explicitly, so the serialized
    /// form (and its hash) is complete.
    pub fn normalize(&mut self) {
        self.pretrain.keys = RecipeKeys::from_recipe(&self.pretrain.recipe());
        self.prune.retrain = RecipeKeys::from_recipe(&self.prune.retrain_recipe());
        self.transfer.keys = RecipeKeys::from_recipe(&self.transfer.recipe());
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            width: self.model.width,
            depth: self.model.depth,
            ..ModelConfig::default()
        }
        .with_classes(num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run.seeds.is_empty() {
            return bad("run.seeds is empty".into());
        }
        let mut s = self.run.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.run.seeds.len() {
            return bad("run.seeds has duplicates".into());
        }
        let verdicts = self.transfer.regimes.contains(&RegimeTag::St) && self.transfer.regimes.contains(&RegimeTag::At);
        if verdicts && self.run.seeds.len() < MIN_SEEDS {
            return bad(format!("verdicts need at least {MIN_SEEDS} seeds"));
        }
        self.model_config(2).validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.data.downstream.is_empty() {
            return bad("data.downstream is empty".into());
        }
        if self.data.source_per_class == 0 || self.data.downstream_per_class == 0 || self.data.test_per_class == 0 {
            return bad("per-class sample counts must be >= 1".into());
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return bad(format!("data.val_fraction {} outside (0, 1)", self.data.val_fraction));
        }
        if self.data.fractions.is_empty() || self.data.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("data.fractions must be nonempty values in (0, 1]".into());
        }
        if self.pretrain.regimes.is_empty() || self.transfer.regimes.is_empty() {
            return bad("pretrain and transfer regimes must be nonempty".into());
        }
        if self.prune.rounds == 0 {
            return bad("prune.rounds must be >= 1".into());
        }
        for (what, levels) in [("levels", self.prune.levels()), ("baseline_levels", self.prune.baseline_levels())] {
            if levels.windows(2).any(|w| w[0] >= w[1]) || levels.first() == Some(&0) {
                return bad(format!("prune.{what} must be strictly increasing and >= 1"));
            }
        }
        if self.prune.levels().last().is_some_and(|&l| l > self.prune.rounds) {
            return bad("prune.levels exceed prune.rounds".into());
        }
        if self.analytics.surface_resolution != 0 && self.analytics.surface_resolution.is_multiple_of(2) {
            return bad("analytics.surface_resolution must be odd".into());
        }
        for (what, r) in [
            ("pretrain", &self.pretrain.recipe()),
            ("prune.retrain", &self.prune.retrain_recipe()),
            ("transfer", &self.transfer.recipe()),
        ] {
            for tag in [RegimeTag::St, RegimeTag::At, RegimeTag::Fat] {
                r.train_config(tag, &self.attack, 0)
                    .validate()
                    .map_err(|e| Error::Config(format!("{what}: {e}")))?;
            }
        }
        self.attack.eval_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

fn check_keys(user: &toml::Table, known: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => return Err(Error::Config(format!("unknown key {path}"))),
            (toml::Value::Table(u), Some(toml::Value::Table(kn))) => check_keys(u, kn, &path)?,
            _ => {}
        }
    }
    Ok(())
}

//! Config-driven pipeline: a stage graph (pretrain → IMP → transfer →
//! evaluate → analyze → report), a JSON run manifest, resume, and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analytics::{
    kernel_heatmap_export, loss_surface_grid, relative_similarity, trajectory_projection, zero_kernel_census,
    SurfaceOptions,
};
use crate::config::ExperimentConfig;
use crate::data::{split_validation, stratified_subsample, synthesize_task_with, Dataset, FractionSpec, Split, TaskKind};
use crate::error::{Error, Result};
use crate::eval::{
    baselines_from, extreme_sparsity, robust_accuracy, standard_accuracy, MetricRecord, VerdictCurve, VerdictRow,
};
use crate::mask::{Mask, PruneMethod};
use crate::model::{Model, ParamSet, Provenance};
use crate::prune::{imp_continue, imp_ladder, one_shot_prune, random_prune, rewind_weights, PruneRoundLog};
use crate::report::{
    csv_bytes, curve_rows, write_table, CensusRow, ExtremeRow, ReportKind, SimilarityRow, SurfaceRow,
};
use crate::seed::substream;
use crate::store::{anchor_path, atomic_write, load_checkpoint, load_mask, save_checkpoint, save_mask, ArtifactStore};
use crate::train::{early_stop_select, pretrain_source, train, write_train_log, RegimeTag};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Pretrain,
    Imp,
    Transfer,
    Evaluate,
    Analyze,
    Report,
}

impl StageKind {
    pub const ALL: [StageKind; 6] = [
        Self::Pretrain,
        Self::Imp,
        Self::Transfer,
        Self::Evaluate,
        Self::Analyze,
        Self::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Imp => "imp",
            Self::Transfer => "transfer",
            Self::Evaluate => "evaluate",
            Self::Analyze => "analyze",
            Self::Report => "report",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Which weights of the anchor a transfer starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MaskSpec {
    Dense,
    Pruned { method: PruneMethod, level: u32 },
}

impl MaskSpec {
    pub fn label(&self) -> String {
        match self {
            Self::Dense => "dense".into(),
            Self::Pruned { method, level } => format!("{method}-L{level}"),
        }
    }

    pub fn method(&self) -> Option<PruneMethod> {
        match self {
            Self::Dense => None,
            Self::Pruned { method, .. } => Some(*method),
        }
    }
}

/// One cell of the transfer grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferKey {
    pub pretrain: Provenance,
    pub spec: MaskSpec,
    pub task: TaskKind,
    pub fraction: f64,
    pub regime: RegimeTag,
    pub seed: u64,
}

impl TransferKey {
    /// Data/seed part shared by every pretraining and mask, so all arms of a
    /// comparison see the same head init, shuffles and attacks.
    fn cell(&self) -> String {
        format!("{}/f{}/{}/seed{}", self.task, self.fraction, self.regime, self.seed)
    }

    pub fn suffix(&self) -> String {
        format!("{}/{}/{}", self.pretrain, self.spec.label(), self.cell())
    }

    pub fn stem(&self) -> String {
        self.suffix().replace('/', "_")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Job {
    Pretrain(RegimeTag),
    Imp { pretrain: RegimeTag, method: PruneMethod },
    Omp(RegimeTag),
    Rp,
    Transfer(TransferKey),
    Evaluate(TransferKey),
    Analyze,
    Report(ReportKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub key: String,
    pub kind: StageKind,
    pub deps: Vec<String>,
    pub job: Job,
}

fn pretrain_key(tag: RegimeTag) -> String {
    format!("pretrain/{}", tag.provenance())
}

fn prune_key(tag: RegimeTag, method: PruneMethod) -> String {
    match method {
        PruneMethod::Rp => "imp/RP".into(),
        _ => format!("imp/{}/{method}", tag.provenance()),
    }
}

fn method_levels(cfg: &ExperimentConfig, method: PruneMethod) -> Vec<u32> {
    if method.is_iterative() {
        cfg.prune.levels()
    } else {
        cfg.prune.baseline_levels()
    }
}

fn retrain_tag(method: PruneMethod) -> RegimeTag {
    if method == PruneMethod::ImpAt {
        RegimeTag::At
    } else {
        RegimeTag::St
    }
}

/// Every transfer of the declared grid, in a fixed order.
pub fn transfer_keys(cfg: &ExperimentConfig) -> Vec<TransferKey> {
    let mut specs = vec![MaskSpec::Dense];
    for &method in &cfg.prune.methods {
        for level in method_levels(cfg, method) {
            specs.push(MaskSpec::Pruned { method, level });
        }
    }
    let mut keys = Vec::new();
    for &tag in &cfg.pretrain.regimes {
        for &spec in &specs {
            for &task in &cfg.data.downstream {
                for &fraction in &cfg.data.fractions {
                    for &regime in &cfg.transfer.regimes {
                        for &seed in &cfg.run.seeds {
                            keys.push(TransferKey {
                                pretrain: tag.provenance(),
                                spec,
                                task,
                                fraction,
                                regime,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    keys
}

/// Models whose loss surfaces are drawn: dense and the sparsest mask of each
/// method, first fraction, first seed.
fn surface_keys(cfg: &ExperimentConfig) -> Vec<TransferKey> {
    if cfg.analytics.surface_resolution == 0 {
        return Vec::new();
    }
    let specs: Vec<MaskSpec> = std::iter::once(MaskSpec::Dense)
        .chain(cfg.prune.methods.iter().filter_map(|&method| {
            method_levels(cfg, method)
                .last()
                .map(|&level| MaskSpec::Pruned { method, level })
        }))
        .collect();
    transfer_keys(cfg)
        .into_iter()
        .filter(|k| k.seed == cfg.run.seeds[0] && k.fraction == cfg.data.fractions[0] && specs.contains(&k.spec))
        .collect()
}

fn report_kinds(cfg: &ExperimentConfig) -> Vec<ReportKind> {
    let mut kinds = Vec::new();
    if cfg.transfer.regimes.contains(&RegimeTag::St) && cfg.transfer.regimes.contains(&RegimeTag::At) {
        kinds.push(ReportKind::Verdicts);
    }
    kinds.push(ReportKind::Curves);
    if cfg.analytics.similarity {
        kinds.push(ReportKind::Similarity);
    }
    if cfg.analytics.census {
        kinds.push(ReportKind::Census);
    }
    if cfg.analytics.surface_resolution > 0 {
        kinds.push(ReportKind::Surfaces);
    }
    kinds
}

fn analyze_enabled(cfg: &ExperimentConfig) -> bool {
    cfg.analytics.similarity || cfg.analytics.census || cfg.analytics.surface_resolution > 0
}

/// The full stage graph in dependency order.
pub fn plan(cfg: &ExperimentConfig) -> Vec<StageSpec> {
    let mut stages = Vec::new();
    for &tag in &cfg.pretrain.regimes {
        stages.push(StageSpec {
            key: pretrain_key(tag),
            kind: StageKind::Pretrain,
            deps: Vec::new(),
            job: Job::Pretrain(tag),
        });
    }
    let mut prune_stages = Vec::new();
    for &method in &cfg.prune.methods {
        if method == PruneMethod::Rp {
            prune_stages.push(StageSpec {
                key: prune_key(RegimeTag::St, method),
                kind: StageKind::Imp,
                deps: Vec::new(),
                job: Job::Rp,
            });
            continue;
        }
        for &tag in &cfg.pretrain.regimes {
            let job = if method == PruneMethod::Omp {
                Job::Omp(tag)
            } else {
                Job::Imp { pretrain: tag, method }
            };
            prune_stages.push(StageSpec {
                key: prune_key(tag, method),
                kind: StageKind::Imp,
                deps: vec![pretrain_key(tag)],
                job,
            });
        }
    }
    let prune_keys: Vec<String> = prune_stages.iter().map(|s| s.key.clone()).collect();
    stages.extend(prune_stages);
    let keys = transfer_keys(cfg);
    let tag_of = |p: Provenance| {
        cfg.pretrain
            .regimes
            .iter()
            .copied()
            .find(|t| t.provenance() == p)
            .expect("provenance of a declared regime")
    };
    for k in &keys {
        let tag = tag_of(k.pretrain);
        let mut deps = vec![pretrain_key(tag)];
        if let Some(m) = k.spec.method() {
            deps.push(prune_key(tag, m));
        }
        stages.push(StageSpec {
            key: format!("transfer/{}", k.suffix()),
            kind: StageKind::Transfer,
            deps,
            job: Job::Transfer(k.clone()),
        });
    }
    let mut eval_keys = Vec::new();
    for k in &keys {
        let key = format!("evaluate/{}", k.suffix());
        eval_keys.push(key.clone());
        stages.push(StageSpec {
            key,
            kind: StageKind::Evaluate,
            deps: vec![format!("transfer/{}", k.suffix())],
            job: Job::Evaluate(k.clone()),
        });
    }
    if analyze_enabled(cfg) {
        let mut deps = prune_keys;
        deps.extend(surface_keys(cfg).iter().map(|k| format!("transfer/{}", k.suffix())));
        stages.push(StageSpec {
            key: "analyze".into(),
            kind: StageKind::Analyze,
            deps,
            job: Job::Analyze,
        });
    }
    for kind in report_kinds(cfg) {
        let deps = match kind {
            ReportKind::Verdicts | ReportKind::Curves => eval_keys.clone(),
            _ => vec!["analyze".into()],
        };
        stages.push(StageSpec {
            key: format!("report/{kind}"),
            kind: StageKind::Report,
            deps,
            job: Job::Report(kind),
        });
    }
    stages
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub kind: StageKind,
    pub deps: Vec<String>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub completed: bool,
    pub error: Option<String>,
    pub started: Option<u64>,
    pub finished: Option<u64>,
    #[serde(default)]
    pub outputs: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub time: u64,
    pub verb: String,
    pub resume: bool,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub name: String,
    pub config_file: String,
    pub stages: BTreeMap<String, StageRecord>,
    pub history: Vec<RunEvent>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.hash()?,
            code_version: env!("CARGO_PKG_VERSION").into(),
            name: cfg.run.name.clone(),
            config_file: CONFIG_FILE.into(),
            stages: BTreeMap::new(),
            history: Vec::new(),
        })
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        atomic_write(&out.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }

    pub fn completed(&self, key: &str) -> bool {
        self.stages.get(key).is_some_and(|s| s.completed)
    }

    /// Every file the manifest accounts for, relative to the output root.
    pub fn referenced_files(&self) -> BTreeSet<String> {
        let mut files: BTreeSet<String> = self.stages.values().flat_map(|s| s.artifacts.iter().cloned()).collect();
        files.insert(MANIFEST_FILE.into());
        files.insert(self.config_file.clone());
        files
    }

    /// Completed stages of `kind`, in key order.
    pub fn stages_of(&self, kind: StageKind) -> impl Iterator<Item = (&String, &StageRecord)> {
        self.stages.iter().filter(move |(_, s)| s.kind == kind)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub blocked: usize,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.failed == 0 && self.blocked == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Stage kind the verb targets; `None` runs the whole pipeline.
    pub verb: Option<StageKind>,
    pub resume: bool,
    pub jobs: usize,
    /// Restricts report stages to these kinds.
    pub reports: Option<Vec<ReportKind>>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            verb: None,
            resume: false,
            jobs: 1,
            reports: None,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub summary: RunSummary,
}

/// Loads `config_path` and runs the whole pipeline on one worker.
pub fn run_experiment(config_path: impl AsRef<Path>, resume: bool) -> Result<RunManifest> {
    let cfg = ExperimentConfig::load(config_path)?;
    let opts = RunOptions {
        resume,
        ..RunOptions::default()
    };
    Ok(run_pipeline(&cfg, &opts)?.manifest)
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

struct TaskData {
    kind: TaskKind,
    val: Dataset,
    test: Dataset,
    fractions: Vec<(f64, Dataset)>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    store: ArtifactStore,
    manifest: Mutex<RunManifest>,
    source: (Dataset, Dataset),
    tasks: Vec<TaskData>,
}

struct StageOutput {
    artifacts: Vec<PathBuf>,
    outputs: Value,
}

fn build_data(cfg: &ExperimentConfig) -> Result<((Dataset, Dataset), Vec<TaskData>)> {
    let root = cfg.run.root_seed;
    let synth = cfg.data.synth();
    let vf = cfg.data.val_fraction;
    let src = synthesize_task_with(
        TaskKind::Source,
        cfg.data.source_per_class,
        substream(root, "data/source"),
        &synth,
    )?;
    let source = split_validation(&src, vf, substream(root, "data/source/val"))?;
    let mut tasks = Vec::new();
    for &kind in &cfg.data.downstream {
        let full = synthesize_task_with(kind, cfg.data.downstream_per_class, substream(root, &format!("data/{kind}/train")), &synth)?;
        let test = synthesize_task_with(kind, cfg.data.test_per_class, substream(root, &format!("data/{kind}/test")), &synth)?
            .with_split(Split::Test);
        let (train_ds, val) = split_validation(&full, vf, substream(root, &format!("data/{kind}/val")))?;
        let mut fractions = Vec::new();
        for &f in &cfg.data.fractions {
            let ds = if f == 1.0 {
                train_ds.clone()
            } else {
                stratified_subsample(
                    &train_ds,
                    FractionSpec {
                        fraction: f,
                        seed: substream(root, &format!("data/{kind}/f{f}")),
                    },
                )?
            };
            fractions.push((f, ds));
        }
        tasks.push(TaskData {
            kind,
            val,
            test,
            fractions,
        });
    }
    Ok((source, tasks))
}

impl Ctx<'_> {
    fn root(&self) -> u64 {
        self.cfg.run.root_seed
    }

    fn task(&self, kind: TaskKind) -> &TaskData {
        self.tasks.iter().find(|t| t.kind == kind).expect("declared task")
    }

    fn train_set(&self, kind: TaskKind, fraction: f64) -> &Dataset {
        &self.task(kind).fractions.iter().find(|(f, _)| *f == fraction).expect("declared fraction").1
    }

    fn source_model(&self) -> Result<Model> {
        Model::new(self.cfg.model_config(TaskKind::Source.num_classes()))
    }

    fn pretrain_path(&self, p: Provenance) -> PathBuf {
        self.store.checkpoint(&format!("pretrain-{p}"))
    }

    fn mask_path(&self, p: Provenance, spec: &MaskSpec, seed: u64) -> Option<PathBuf> {
        match *spec {
            MaskSpec::Dense => None,
            MaskSpec::Pruned {
                method: PruneMethod::Rp,
                level,
            } => Some(self.store.mask(&format!("RP-L{level}-seed{seed}"))),
            MaskSpec::Pruned {
                method: PruneMethod::Omp,
                level,
            } => Some(self.store.mask(&format!("{p}-OMP-L{level}"))),
            MaskSpec::Pruned { method, level } => Some(self.store.mask(&format!("{p}-{method}-r{level}"))),
        }
    }

    fn transfer_path(&self, k: &TransferKey) -> PathBuf {
        self.store.checkpoint(&format!("transfer-{}", k.stem()))
    }

    fn with_manifest<R>(&self, f: impl FnOnce(&mut RunManifest) -> R) -> Result<R> {
        let mut m = self.manifest.lock().expect("manifest lock");
        let r = f(&mut m);
        m.save(self.store.root())?;
        Ok(r)
    }

    fn rel(&self, paths: &[PathBuf]) -> Vec<String> {
        paths.iter().map(|p| self.store.relative(p)).collect()
    }

    fn execute(&self, spec: &StageSpec, partial: bool) -> Result<StageOutput> {
        match &spec.job {
            Job::Pretrain(tag) => self.pretrain(*tag),
            Job::Imp { pretrain, method } => self.imp(&spec.key, *pretrain, *method, partial),
            Job::Omp(tag) => self.omp(*tag),
            Job::Rp => self.rp(),
            Job::Transfer(k) => self.transfer(k),
            Job::Evaluate(k) => self.evaluate(k),
            Job::Analyze => self.analyze(),
            Job::Report(kind) => {
                let manifest = self.manifest.lock().expect("manifest lock").clone();
                Ok(StageOutput {
                    artifacts: emit_report(&manifest, &self.store, *kind)?,
                    outputs: Value::Null,
                })
            }
        }
    }

    fn pretrain(&self, tag: RegimeTag) -> Result<StageOutput> {
        let model = self.source_model()?;
        let tc = self
            .cfg
            .pretrain
            .recipe()
            .train_config(tag, &self.cfg.attack, substream(self.root(), &format!("pretrain/{tag}")));
        let (anchor, out) = pretrain_source(&model, &self.source.0, Some(&self.source.1), &tc)?;
        let prov = tag.provenance();
        let ck = self.pretrain_path(prov);
        save_checkpoint(&anchor, &ck)?;
        let log = self.store.metrics(&format!("pretrain-{prov}.csv"));
        write_train_log(&out.log, &log)?;
        let chosen = early_stop_select(&out.log, tag)?;
        Ok(StageOutput {
            artifacts: vec![ck.clone(), anchor_path(&ck), log],
            outputs: json!({
                "epoch": chosen.epoch,
                "val_SA": chosen.val_sa,
                "val_RA": chosen.val_ra,
                "backward_passes": out.backward_passes,
            }),
        })
    }

    fn imp(&self, key: &str, tag: RegimeTag, method: PruneMethod, partial: bool) -> Result<StageOutput> {
        let prov = tag.provenance();
        let model = self.source_model()?;
        let anchor = load_checkpoint(self.pretrain_path(prov))?;
        let rt = retrain_tag(method);
        let tc = self.cfg.prune.retrain_recipe().train_config(
            rt,
            &self.cfg.attack,
            substream(self.root(), &format!("imp/{prov}/{method}")),
        );
        let log_path = self.store.metrics(&format!("imp-{prov}-{method}.csv"));
        let spec = |level| MaskSpec::Pruned { method, level };
        let mut start = Mask::full(model.registry(), method, prov);
        let mut logs: Vec<PruneRoundLog> = Vec::new();
        let mut artifacts = vec![log_path.clone()];
        if partial {
            let done = self
                .manifest
                .lock()
                .expect("manifest lock")
                .stages
                .get(key)
                .and_then(|s| s.outputs.get("rounds_done"))
                .and_then(Value::as_u64)
                .unwrap_or(0) as u32;
            if done > 0 {
                let mp = self.mask_path(prov, &spec(done), 0).expect("pruned");
                if let (Ok(m), Ok(l)) = (load_mask(&mp), crate::report::read_csv::<PruneRoundLog>(&log_path)) {
                    if m.round() == done && l.len() == done as usize {
                        start = m;
                        logs = l;
                        artifacts.extend((1..=done).map(|r| self.mask_path(prov, &spec(r), 0).expect("pruned")));
                    }
                }
            }
        }
        imp_continue(
            &model,
            &anchor,
            start,
            self.cfg.prune.rounds,
            &tc,
            &self.source.0,
            Some(&self.source.1),
            |m, l| {
                let mp = self.mask_path(prov, &spec(m.round()), 0).expect("pruned");
                save_mask(m, &mp)?;
                logs.push(l.clone());
                atomic_write(&log_path, &csv_bytes(&logs, &[])?)?;
                artifacts.push(mp);
                let rel = self.rel(&artifacts);
                self.with_manifest(|man| {
                    if let Some(s) = man.stages.get_mut(key) {
                        s.artifacts = rel;
                        s.outputs = json!({ "rounds_done": m.round() });
                    }
                })
            },
        )?;
        Ok(StageOutput {
            artifacts,
            outputs: json!({
                "rounds_done": self.cfg.prune.rounds,
                "sparsity": logs.iter().map(|l| l.sparsity_after).collect::<Vec<_>>(),
            }),
        })
    }

    fn omp(&self, tag: RegimeTag) -> Result<StageOutput> {
        let prov = tag.provenance();
        let model = self.source_model()?;
        let anchor = load_checkpoint(self.pretrain_path(prov))?;
        let total = model.registry().total_prunable();
        let mut artifacts = Vec::new();
        for level in self.cfg.prune.baseline_levels() {
            let m = one_shot_prune(&anchor, model.registry(), imp_ladder(total, level))?;
            let p = self
                .mask_path(prov, &MaskSpec::Pruned { method: PruneMethod::Omp, level }, 0)
                .expect("pruned");
            save_mask(&m, &p)?;
            artifacts.push(p);
        }
        Ok(StageOutput {
            artifacts,
            outputs: Value::Null,
        })
    }

    fn rp(&self) -> Result<StageOutput> {
        let model = self.source_model()?;
        let total = model.registry().total_prunable();
        let mut artifacts = Vec::new();
        for level in self.cfg.prune.baseline_levels() {
            for &seed in &self.cfg.run.seeds {
                let s = substream(self.root(), &format!("rp/L{level}/seed{seed}"));
                let m = random_prune(s, imp_ladder(total, level), model.registry())?;
                let p = self
                    .mask_path(Provenance::Random, &MaskSpec::Pruned { method: PruneMethod::Rp, level }, seed)
                    .expect("pruned");
                save_mask(&m, &p)?;
                artifacts.push(p);
            }
        }
        Ok(StageOutput {
            artifacts,
            outputs: Value::Null,
        })
    }

    fn load_mask_for(&self, k: &TransferKey) -> Result<Option<Mask>> {
        self.mask_path(k.pretrain, &k.spec, k.seed).map(load_mask).transpose()
    }

    fn transfer(&self, k: &TransferKey) -> Result<StageOutput> {
        let anchor = load_checkpoint(self.pretrain_path(k.pretrain))?;
        let mask = self.load_mask_for(k)?;
        let start = match &mask {
            Some(m) => rewind_weights(&anchor, m)?,
            None => anchor.with_tensors(anchor.anchor().clone())?,
        };
        let model = Model::new(self.cfg.model_config(k.task.num_classes()))?;
        let tseed = substream(self.root(), &format!("transfer/{}", k.cell()));
        let params = model.transfer_from(&start, substream(tseed, "head"))?;
        let tc = self.cfg.transfer.recipe().train_config(k.regime, &self.cfg.attack, tseed);
        let out = train(
            &model,
            params,
            mask.as_ref(),
            self.train_set(k.task, k.fraction),
            Some(&self.task(k.task).val),
            &tc,
        )?;
        let chosen = early_stop_select(&out.log, k.regime)?;
        let ck = self.transfer_path(k);
        save_checkpoint(out.snapshot(chosen), &ck)?;
        let log = self.store.metrics(&format!("transfer-{}.csv", k.stem()));
        write_train_log(&out.log, &log)?;
        let mut artifacts = vec![ck.clone(), anchor_path(&ck), log];
        let mut outputs = json!({ "epoch": chosen.epoch, "backward_passes": out.backward_passes });
        if self.cfg.analytics.trajectory {
            match trajectory_projection(&out.snapshots, mask.as_ref()) {
                Ok(t) => {
                    let p = self.store.grid(&format!("trajectory-{}.csv", k.stem()));
                    t.write_csv(&p)?;
                    artifacts.push(p);
                }
                Err(e) => outputs["trajectory_error"] = json!(e.to_string()),
            }
        }
        Ok(StageOutput { artifacts, outputs })
    }

    fn evaluate(&self, k: &TransferKey) -> Result<StageOutput> {
        let params = load_checkpoint(self.transfer_path(k))?;
        let mask = self.load_mask_for(k)?;
        let model = Model::new(self.cfg.model_config(k.task.num_classes()))?;
        let net = model.subnetwork(&params, mask.as_ref());
        let test = &self.task(k.task).test;
        let sa = standard_accuracy(&net, test)?;
        let ra = robust_accuracy(
            &net,
            test,
            &self.cfg.attack.eval_config(),
            substream(self.root(), &format!("eval/{}/seed{}", k.task, k.seed)),
        )?;
        let record = MetricRecord {
            pretrain: k.pretrain,
            method: k.spec.method(),
            sparsity: mask.as_ref().map_or(0.0, Mask::sparsity),
            regime: k.regime,
            data_fraction: k.fraction,
            seed: k.seed,
            sa,
            ra,
        };
        Ok(StageOutput {
            artifacts: Vec::new(),
            outputs: json!({ "task": k.task, "level": level_of(&k.spec), "record": record }),
        })
    }

    /// Every mask on disk with its display name and ladder level.
    fn all_masks(&self) -> Vec<(String, u32, PathBuf)> {
        let mut out = Vec::new();
        for &method in &self.cfg.prune.methods {
            let levels: Vec<u32> = match method {
                m if m.is_iterative() => (1..=self.cfg.prune.rounds).collect(),
                _ => self.cfg.prune.baseline_levels(),
            };
            let provs: Vec<Provenance> = if method == PruneMethod::Rp {
                vec![Provenance::Random]
            } else {
                self.cfg.pretrain.regimes.iter().map(|t| t.provenance()).collect()
            };
            let seeds: &[u64] = if method == PruneMethod::Rp { &self.cfg.run.seeds } else { &[0] };
            for &p in &provs {
                for &level in &levels {
                    for &seed in seeds {
                        let path = self.mask_path(p, &MaskSpec::Pruned { method, level }, seed).expect("pruned");
                        let name = self.store.relative(&path).trim_start_matches("masks/").trim_end_matches(".mask").to_string();
                        out.push((name, level, path));
                    }
                }
            }
        }
        out
    }

    fn analyze(&self) -> Result<StageOutput> {
        let model = self.source_model()?;
        let registry = model.registry();
        let total = registry.total_prunable();
        let mut artifacts = Vec::new();
        let masks: Vec<(String, u32, Mask)> = self
            .all_masks()
            .into_iter()
            .map(|(n, l, p)| Ok((n, l, load_mask(&p)?)))
            .collect::<Result<_>>()?;
        let mut similarity = Vec::new();
        if self.cfg.analytics.similarity {
            for level in self.cfg.prune.levels() {
                let at: Vec<&(String, u32, Mask)> = masks.iter().filter(|m| m.1 == level).collect();
                for (i, a) in at.iter().enumerate() {
                    for b in &at[i + 1..] {
                        similarity.push(SimilarityRow {
                            level,
                            sparsity: imp_ladder(total, level),
                            a: a.0.clone(),
                            b: b.0.clone(),
                            similarity: relative_similarity(&a.2, &b.2)?,
                        });
                    }
                }
            }
        }
        let mut census = Vec::new();
        if self.cfg.analytics.census {
            for (name, _, m) in &masks {
                for t in zero_kernel_census(m, registry)?.tensors {
                    census.push(CensusRow {
                        mask: name.clone(),
                        sparsity: m.sparsity(),
                        tensor: t.name,
                        stage: t.stage,
                        zero_kernels: t.zero_kernels,
                        total_kernels: t.total_kernels,
                    });
                }
                let p = self.store.grid(&format!("heatmap-{name}.csv"));
                kernel_heatmap_export(m, registry, &p)?;
                artifacts.push(p);
            }
        }
        let mut surfaces = Vec::new();
        for k in surface_keys(self.cfg) {
            let params = load_checkpoint(self.transfer_path(&k))?;
            let mask = self.load_mask_for(&k)?;
            let tmodel = Model::new(self.cfg.model_config(k.task.num_classes()))?;
            let test = &self.task(k.task).test;
            let n = self.cfg.analytics.surface_batch.min(test.len());
            let idx: Vec<usize> = (0..n).collect();
            let (x, y) = test.batch(&idx);
            let batch_id = format!("{}-test-first{n}", k.task);
            let opts = SurfaceOptions {
                resolution: self.cfg.analytics.surface_resolution,
                seed: substream(self.root(), &format!("surface/{}", k.suffix())),
                attack: self.cfg.analytics.surface_attacked.then(|| self.cfg.attack.eval_config()),
                reattack: self.cfg.analytics.surface_reattack,
            };
            let grid = loss_surface_grid(&tmodel, &params, mask.as_ref(), (&x, &y), &batch_id, &opts)?;
            let p = self.store.grid(&format!("surface-{}.csv", k.stem()));
            grid.write_csv(&p)?;
            surfaces.push(SurfaceRow {
                key: k.suffix(),
                file: self.store.relative(&p),
                resolution: grid.resolution,
                attacked: grid.attacked,
                batch_id,
                center_loss: grid.center(),
                min_loss: grid.values.iter().copied().fold(f64::INFINITY, f64::min),
                max_loss: grid.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
            artifacts.push(p);
        }
        Ok(StageOutput {
            artifacts,
            outputs: json!({ "similarity": similarity, "census": census, "surfaces": surfaces }),
        })
    }
}

fn level_of(spec: &MaskSpec) -> u32 {
    match spec {
        MaskSpec::Dense => 0,
        MaskSpec::Pruned { level, .. } => *level,
    }
}

/// Depth in the dependency graph; stages of equal depth run concurrently.
fn waves(stages: &[StageSpec]) -> Vec<Vec<&StageSpec>> {
    let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out: Vec<Vec<&StageSpec>> = Vec::new();
    for s in stages {
        let d = s.deps.iter().filter_map(|k| depth.get(k.as_str())).map(|d| d + 1).max().unwrap_or(0);
        depth.insert(&s.key, d);
        if out.len() <= d {
            out.resize_with(d + 1, Vec::new);
        }
        out[d].push(s);
    }
    out
}

fn select(all: &[StageSpec], opts: &RunOptions) -> Vec<StageSpec> {
    let Some(verb) = opts.verb else {
        return all
            .iter()
            .filter(|s| match (&s.job, &opts.reports) {
                (Job::Report(k), Some(ks)) => ks.contains(k),
                _ => true,
            })
            .cloned()
            .collect();
    };
    let mut wanted: BTreeSet<String> = all
        .iter()
        .filter(|s| s.kind == verb)
        .filter(|s| match (&s.job, &opts.reports) {
            (Job::Report(k), Some(ks)) => ks.contains(k),
            _ => true,
        })
        .map(|s| s.key.clone())
        .collect();
    for s in all.iter().rev() {
        if wanted.contains(&s.key) {
            wanted.extend(s.deps.iter().cloned());
        }
    }
    all.iter().filter(|s| wanted.contains(&s.key)).cloned().collect()
}

fn remove_artifacts(root: &Path, rec: &StageRecord) {
    for a in &rec.artifacts {
        let _ = fs::remove_file(root.join(a));
    }
}

/// Runs the selected part of the stage graph under `cfg.run.out`.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.run.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let store = ArtifactStore::open(&out)?;
    let hash = cfg.hash()?;
    let fresh_run = opts.verb.is_none() && !opts.resume;
    let manifest = match RunManifest::load(&out) {
        Ok(m) if m.config_hash == hash && !fresh_run => m,
        Ok(m) if fresh_run => {
            for rec in m.stages.values() {
                remove_artifacts(&out, rec);
            }
            RunManifest {
                history: m.history,
                ..RunManifest::new(cfg)?
            }
        }
        Ok(_) => {
            return Err(Error::Config(format!(
                "{} holds a run of a different config; use `run` without --resume to start over",
                out.display()
            )))
        }
        Err(_) => RunManifest::new(cfg)?,
    };
    atomic_write(&out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    let all = plan(cfg);
    let selected = select(&all, opts);
    let mut manifest = manifest;
    if !opts.resume {
        if let Some(verb) = opts.verb {
            // Redo the verb's own stages and everything downstream of them.
            let mut stale: BTreeSet<String> = selected.iter().filter(|s| s.kind == verb).map(|s| s.key.clone()).collect();
            loop {
                let more: Vec<String> = manifest
                    .stages
                    .iter()
                    .filter(|(k, r)| !stale.contains(*k) && r.deps.iter().any(|d| stale.contains(d)))
                    .map(|(k, _)| k.clone())
                    .collect();
                if more.is_empty() {
                    break;
                }
                stale.extend(more);
            }
            for k in &stale {
                if let Some(rec) = manifest.stages.remove(k) {
                    remove_artifacts(&out, &rec);
                }
            }
        }
    }
    manifest.save(&out)?;
    let (source, tasks) = build_data(cfg)?;
    let ctx = Ctx {
        cfg,
        store,
        manifest: Mutex::new(manifest),
        source,
        tasks,
    };
    let summary = Mutex::new(RunSummary::default());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| -> Result<()> {
        for wave in waves(&selected) {
            wave.par_iter().try_for_each(|spec| run_stage(&ctx, spec, opts, &summary))?;
        }
        Ok(())
    })?;
    let summary = summary.into_inner().expect("summary lock");
    let verb = opts.verb.map_or("run", StageKind::as_str).to_string();
    let s2 = summary.clone();
    ctx.with_manifest(|m| {
        m.history.push(RunEvent {
            time: now(),
            verb,
            resume: opts.resume,
            summary: s2,
        })
    })?;
    let manifest = ctx.manifest.into_inner().expect("manifest lock");
    Ok(RunOutcome { manifest, summary })
}

fn run_stage(ctx: &Ctx<'_>, spec: &StageSpec, opts: &RunOptions, summary: &Mutex<RunSummary>) -> Result<()> {
    let root = ctx.store.root().to_path_buf();
    let (blocker, done, partial) = {
        let m = ctx.manifest.lock().expect("manifest lock");
        let blocker = spec.deps.iter().find(|d| !m.completed(d)).cloned();
        let rec = m.stages.get(&spec.key);
        let done = rec.is_some_and(|r| r.completed && r.artifacts.iter().all(|a| root.join(a).exists()));
        (blocker, done, rec.is_some_and(|r| !r.completed))
    };
    let bump = |f: fn(&mut RunSummary)| f(&mut summary.lock().expect("summary lock"));
    if let Some(dep) = blocker {
        ctx.with_manifest(|m| {
            let rec = m.stages.entry(spec.key.clone()).or_insert_with(|| blank(spec));
            rec.completed = false;
            rec.error = Some(format!("blocked by {dep}"));
        })?;
        bump(|s| s.blocked += 1);
        return Ok(());
    }
    if done {
        bump(|s| s.skipped += 1);
        return Ok(());
    }
    let t0 = Instant::now();
    ctx.with_manifest(|m| {
        let rec = m.stages.entry(spec.key.clone()).or_insert_with(|| blank(spec));
        rec.started = Some(now());
        rec.error = None;
        rec.completed = false;
    })?;
    let result = ctx.execute(spec, partial);
    let ok = result.is_ok();
    if opts.verbose {
        match &result {
            Ok(_) => eprintln!("[done {:>7.1}s] {}", t0.elapsed().as_secs_f64(), spec.key),
            Err(e) => eprintln!("[FAIL {:>7.1}s] {}: {e}", t0.elapsed().as_secs_f64(), spec.key),
        }
    }
    ctx.with_manifest(|m| {
        let rec = m.stages.entry(spec.key.clone()).or_insert_with(|| blank(spec));
        rec.finished = Some(now());
        match result {
            Ok(o) => {
                rec.artifacts = ctx.rel(&o.artifacts);
                rec.outputs = o.outputs;
                rec.completed = true;
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
    })?;
    if ok {
        bump(|s| s.executed += 1);
    } else {
        bump(|s| s.failed += 1);
    }
    Ok(())
}

fn blank(spec: &StageSpec) -> StageRecord {
    StageRecord {
        kind: spec.kind,
        deps: spec.deps.clone(),
        artifacts: Vec::new(),
        completed: false,
        error: None,
        started: None,
        finished: None,
        outputs: Value::Null,
    }
}

/// One evaluated transfer as written to `records.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub task: TaskKind,
    pub pretrain: Provenance,
    pub method: String,
    pub level: u32,
    pub sparsity: f64,
    pub regime: RegimeTag,
    pub data_fraction: f64,
    pub seed: u64,
    #[serde(rename = "SA")]
    pub sa: f64,
    #[serde(rename = "RA")]
    pub ra: f64,
}

impl RecordRow {
    pub fn record(&self) -> MetricRecord {
        MetricRecord {
            pretrain: self.pretrain,
            method: self.method.parse().ok(),
            sparsity: self.sparsity,
            regime: self.regime,
            data_fraction: self.data_fraction,
            seed: self.seed,
            sa: self.sa,
            ra: self.ra,
        }
    }
}

pub const RECORD_HEADER: [&str; 10] = [
    "task", "pretrain", "method", "level", "sparsity", "regime", "data_fraction", "seed", "SA", "RA",
];
pub const VERDICT_HEADER: [&str; 11] = [
    "sparsity",
    "ST_SA_mean",
    "ST_SA_std",
    "AT_SA_mean",
    "AT_SA_std",
    "AT_RA_mean",
    "AT_RA_std",
    "ST_SA_matching",
    "AT_SA_matching",
    "AT_RA_matching",
    "double_win",
];
pub const CURVE_HEADER: [&str; 5] = ["sparsity", "regime", "metric", "mean", "std"];

/// Evaluated transfers recorded in the manifest, in stage-key order.
pub fn collect_records(manifest: &RunManifest) -> Result<Vec<RecordRow>> {
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for (key, rec) in manifest.stages_of(StageKind::Evaluate) {
        if !rec.completed {
            missing.push(key.clone());
            continue;
        }
        let r: MetricRecord = serde_json::from_value(rec.outputs["record"].clone())?;
        let task: TaskKind = serde_json::from_value(rec.outputs["task"].clone())?;
        let level = rec.outputs["level"].as_u64().unwrap_or(0) as u32;
        rows.push(RecordRow {
            task,
            pretrain: r.pretrain,
            method: r.method.map_or("dense".into(), |m| m.to_string()),
            level,
            sparsity: r.sparsity,
            regime: r.regime,
            data_fraction: r.data_fraction,
            seed: r.seed,
            sa: r.sa,
            ra: r.ra,
        });
    }
    if rows.is_empty() && missing.is_empty() {
        missing.push("evaluate/*".into());
    }
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    Ok(rows)
}

/// (pretrain, method, task, fraction) lineages with their records; dense
/// records are kept under "dense".
type Lineages = BTreeMap<(Provenance, String, String, String), Vec<RecordRow>>;

fn lineages(rows: &[RecordRow]) -> Lineages {
    let mut out: Lineages = BTreeMap::new();
    for r in rows {
        out.entry((r.pretrain, r.method.clone(), r.task.to_string(), format!("{}", r.data_fraction)))
            .or_default()
            .push(r.clone());
    }
    out
}

fn analysis_rows<T: serde::de::DeserializeOwned>(manifest: &RunManifest, field: &str) -> Result<Vec<T>> {
    match manifest.stages.get("analyze") {
        Some(rec) if rec.completed => Ok(serde_json::from_value(rec.outputs[field].clone())?),
        _ => Err(Error::MissingInputs(vec!["analyze".into()])),
    }
}

/// Verdict tables for one lineage; the dense records of the same
/// pretraining, task and fraction serve as baselines.
pub fn lineage_verdicts(sparse: &[RecordRow], dense: &[RecordRow]) -> Result<VerdictCurve> {
    let base: Vec<MetricRecord> = dense.iter().map(RecordRow::record).collect();
    let recs: Vec<MetricRecord> = sparse.iter().map(RecordRow::record).collect();
    VerdictCurve::build(&recs, &baselines_from(&base)?)
}

/// Writes the tables of `kind` under `metrics/` and returns their paths.
pub fn emit_report(manifest: &RunManifest, store: &ArtifactStore, kind: ReportKind) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    match kind {
        ReportKind::Verdicts => {
            let rows = collect_records(manifest)?;
            let lin = lineages(&rows);
            let mut extremes = Vec::new();
            for ((p, method, task, frac), sparse) in &lin {
                if method == "dense" {
                    continue;
                }
                let dense = lin
                    .get(&(*p, "dense".to_string(), task.clone(), frac.clone()))
                    .ok_or_else(|| Error::MissingInputs(vec![format!("dense baseline for {p}/{task}/f{frac}")]))?;
                let curve = lineage_verdicts(sparse, dense)?;
                let stem = store.metrics(&format!("verdicts-{p}-{method}-{task}-f{frac}"));
                files.extend(write_table::<VerdictRow>(curve.rows(), &stem, &VERDICT_HEADER)?);
                extremes.push(ExtremeRow {
                    pretrain: p.to_string(),
                    method: method.clone(),
                    task: task.clone(),
                    fraction: frac.parse().unwrap_or(f64::NAN),
                    extreme_sparsity: extreme_sparsity(&curve),
                });
            }
            files.extend(write_table(
                &extremes,
                &store.metrics("extreme-sparsity"),
                &["pretrain", "method", "task", "fraction", "extreme_sparsity"],
            )?);
        }
        ReportKind::Curves => {
            let rows = collect_records(manifest)?;
            files.extend(write_table(&rows, &store.metrics("records"), &RECORD_HEADER)?);
            let lin = lineages(&rows);
            let has_sparse = |p: &Provenance, t: &String, f: &String| {
                lin.keys().any(|(q, m, u, g)| q == p && m != "dense" && u == t && g == f)
            };
            for ((p, method, task, frac), recs) in &lin {
                let mut all: Vec<MetricRecord> = recs.iter().map(RecordRow::record).collect();
                if method == "dense" {
                    if has_sparse(p, task, frac) {
                        continue;
                    }
                } else if let Some(d) = lin.get(&(*p, "dense".to_string(), task.clone(), frac.clone())) {
                    all.extend(d.iter().map(RecordRow::record));
                }
                let stem = store.metrics(&format!("curves-{p}-{method}-{task}-f{frac}"));
                files.extend(write_table(&curve_rows(&all), &stem, &CURVE_HEADER)?);
            }
        }
        ReportKind::Similarity => {
            let rows: Vec<SimilarityRow> = analysis_rows(manifest, "similarity")?;
            files.extend(write_table(
                &rows,
                &store.metrics("similarity"),
                &["level", "sparsity", "a", "b", "similarity"],
            )?);
        }
        ReportKind::Census => {
            let rows: Vec<CensusRow> = analysis_rows(manifest, "census")?;
            files.extend(write_table(
                &rows,
                &store.metrics("census"),
                &["mask", "sparsity", "tensor", "stage", "zero_kernels", "total_kernels"],
            )?);
        }
        ReportKind::Surfaces => {
            let rows: Vec<SurfaceRow> = analysis_rows(manifest, "surfaces")?;
            files.extend(write_table(
                &rows,
                &store.metrics("surfaces"),
                &["key", "file", "resolution", "attacked", "batch_id", "center_loss", "min_loss", "max_loss"],
            )?);
        }
    }
    Ok(files)
}

/// Anchor weights for a pretraining, as saved by the pipeline.
pub fn load_anchor(out: &Path, p: Provenance) -> Result<ParamSet> {
    load_checkpoint(out.join("checkpoints").join(format!("pretrain-{p}.ckpt")))
}

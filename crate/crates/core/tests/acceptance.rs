//! One PASS/FAIL line per acceptance criterion. Exit status is nonzero if any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::Rng;
use ticketlab::analytics::{
    batch_loss, filter_normalized_direction, loss_surface_grid, relative_similarity, zero_kernel_census,
    SurfaceOptions,
};
use ticketlab::attack::{pgd_attack, AttackConfig};
use ticketlab::config::ExperimentConfig;
use ticketlab::data::{synthesize_task, Split, TaskKind};
use ticketlab::eval::{robust_accuracy, standard_accuracy};
use ticketlab::experiment::{run_pipeline, RunOptions};
use ticketlab::mask::{Mask, PruneMethod};
use ticketlab::model::{Model, ModelConfig, ParamSet, Provenance};
use ticketlab::optim::LrSchedule;
use ticketlab::prune::{global_magnitude_prune, imp_ladder, random_prune, rewind_weights, round_half_up, IMP_RATE};
use ticketlab::report::{read_csv, ExtremeRow};
use ticketlab::eval::VerdictRow;
use ticketlab::seed;
use ticketlab::store::{load_checkpoint, load_mask, save_checkpoint, save_mask};
use ticketlab::tensor::Tensor;
use ticketlab::train::{train, TrainConfig, TrainRegime};

use common::{LinearLoss, Rng64};

type Check = std::result::Result<String, String>;

const CHILD_ENV: &str = "TICKETLAB_ACCEPTANCE_WRITER";

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond { Ok(()) } else { Err(msg.into()) }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch_dir(name: &str) -> PathBuf {
    let d = workspace().join("target/acceptance").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).expect("scratch dir");
    d
}

fn same_bits(a: &ParamSet, b: &ParamSet) -> bool {
    let eq = |x: &BTreeMap<String, Tensor<f32>>, y: &BTreeMap<String, Tensor<f32>>| {
        x.len() == y.len()
            && x.iter().zip(y).all(|((n, s), (m, t))| {
                n == m
                    && s.shape() == t.shape()
                    && s.data().iter().zip(t.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    };
    a.provenance() == b.provenance() && eq(a.tensors(), b.tensors()) && eq(a.anchor(), b.anchor())
}

/// Anchor at `init(seed)` with tensors moved away from it, as after training.
fn drifted(model: &Model, seed_value: u64, prov: Provenance) -> ParamSet {
    let mut p = model.init(seed_value);
    p.freeze_anchor(prov).unwrap();
    let mut rng = seed::stream(seed_value, "drift");
    let moved = p
        .tensors()
        .iter()
        .map(|(n, t)| {
            let d = t.data();
            (n.clone(), Tensor::from_fn(t.shape(), |i| d[i] + rng.random_range(-0.05f32..0.05)))
        })
        .collect();
    p.with_tensors(moved).unwrap()
}

/// Bernoulli mask; the keep probability is drawn uniformly when `None`.
fn random_mask(model: &Model, rng: &mut Rng64, keep: Option<f64>) -> Mask {
    let keep = keep.unwrap_or_else(|| rng.random_range(0.0..1.0));
    let reg = model.registry();
    let bits = reg
        .prunable()
        .iter()
        .map(|n| (n.clone(), (0..reg.numel(n)).map(|_| rng.random_bool(keep)).collect()))
        .collect();
    Mask::new(bits, 1, PruneMethod::Rp, Provenance::Random)
}

fn c1_gradients() -> Check {
    let t = Instant::now();
    let res = common::gradcheck_all(100, 11).map_err(e2s)?;
    let elapsed = t.elapsed();
    let worst = res.iter().map(|r| r.1).fold(0.0, f64::max);
    for (op, err) in &res {
        ensure(*err < 1e-5, format!("{op}: relative error {err:e}"))?;
    }
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{} ops × 100 instances, worst rel err {worst:.1e}, {:.1}s", res.len(), elapsed.as_secs_f64()))
}

fn c2_pgd_oracle() -> Check {
    let t = Instant::now();
    let mut rng = seed::stream(12, "pgd-oracle");
    let eps = AttackConfig::EPS;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for i in 0..500 {
        let d = rng.random_range(2..10);
        let n = rng.random_range(1..6);
        let w: Vec<f64> = (0..d)
            .map(|_| {
                let v = rng.random_range(0.05..2.0);
                if rng.random::<bool>() { v } else { -v }
            })
            .collect();
        let model = LinearLoss { w: w.clone(), b: rng.random_range(-1.0..1.0) };
        // Interior points, so the pixel box never binds.
        let x = common::uniform(&mut rng, &[n, d], 0.2, 0.8);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let random_init = i % 2 == 1;
        let alpha = if random_init { eps * rng.random_range(2.0..3.0) } else { eps * rng.random_range(1.0..2.0) };
        let cfg = AttackConfig { epsilon: eps, alpha, steps: rng.random_range(1..8), random_init };
        let p = pgd_attack(&model, &x, &labels, &cfg, i).map_err(e2s)?;
        for (s, &y) in labels.iter().enumerate() {
            for (j, wj) in w.iter().enumerate() {
                let want = eps * (-LinearLoss::sign(y) * wj).signum();
                let got = p.delta.data()[s * d + j];
                ensure((got - want).abs() <= 1e-15, format!("case {i}: δ[{s},{j}] = {got}, closed form {want}"))?;
            }
        }
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        let want = model.loss(&x, &labels) + eps * l1;
        let got = model.loss(&p.apply(&x), &labels);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() < 1e-9, format!("case {i}: loss {got} vs max {want}"))?;
        cases += 1;
    }
    Ok(format!("{cases} linear models, max loss gap {worst:.1e}, {:.2}s", t.elapsed().as_secs_f64()))
}

fn c3_ladder() -> Check {
    let model = common::small_model(8);
    let total = model.registry().total_prunable();
    let params = drifted(&model, 3, Provenance::At);
    let mut mask = Mask::full(model.registry(), PruneMethod::ImpSt, Provenance::At);
    let mut by_round = BTreeMap::new();
    for k in 1..=16 {
        mask = global_magnitude_prune(&params, &mask, IMP_RATE).map_err(e2s)?;
        by_round.insert(k, mask.sparsity());
    }
    let mut parts = Vec::new();
    for (k, target) in [(6u32, 0.7379), (10, 0.8926), (16, 0.9719)] {
        // Independent closed form: keep ⌊·⌉ of 80% each round.
        let mut kept = total;
        for _ in 0..k {
            kept -= round_half_up(0.2 * kept as f64);
        }
        let oracle = 1.0 - kept as f64 / total as f64;
        let got = by_round[&k];
        ensure(got == oracle, format!("k={k}: mask {got} vs integer oracle {oracle}"))?;
        ensure(imp_ladder(total, k) == got, format!("k={k}: ladder helper disagrees"))?;
        ensure((got - target).abs() <= 0.001, format!("k={k}: {:.4}% vs {:.2}%", 100.0 * got, 100.0 * target))?;
        parts.push(format!("k={k} {:.3}%", 100.0 * got));
    }
    Ok(parts.join(", "))
}

fn c4_rewind() -> Check {
    let model = common::small_model(4);
    let mut rng = seed::stream(4, "rewind");
    for i in 0..50 {
        let prov = [Provenance::Std, Provenance::At][i % 2];
        let params = drifted(&model, 100 + i as u64, prov);
        let mask = if i % 3 == 0 {
            random_mask(&model, &mut rng, None)
        } else {
            let mut m = Mask::full(model.registry(), PruneMethod::ImpSt, prov);
            for _ in 0..rng.random_range(1..12) {
                m = global_magnitude_prune(&params, &m, IMP_RATE).map_err(e2s)?;
            }
            m
        };
        let once = rewind_weights(&params, &mask).map_err(e2s)?;
        for (name, t) in once.tensors() {
            let a = &params.anchor()[name];
            let bits = mask.get(name);
            for (j, (&v, &w)) in t.data().iter().zip(a.data()).enumerate() {
                let kept = bits.is_none_or(|b| b[j]);
                let want = if kept { w.to_bits() } else { 0f32.to_bits() };
                ensure(v.to_bits() == want, format!("case {i}: {name}[{j}] not restored"))?;
            }
        }
        let twice = rewind_weights(&once, &mask).map_err(e2s)?;
        ensure(same_bits(&once, &twice), format!("case {i}: rewind not idempotent"))?;
    }
    Ok("50 masks, kept weights bitwise equal to the anchor, idempotent".into())
}

/// Small model trained briefly on downstream A.
fn trained_desk_model() -> std::result::Result<(Model, ParamSet, ticketlab::data::Dataset), String> {
    let kind = TaskKind::DownstreamA;
    let train_ds = synthesize_task(kind, 60, 51).map_err(e2s)?;
    let test = synthesize_task(kind, 25, 52).map_err(e2s)?.with_split(Split::Test);
    let model = Model::new(ModelConfig::default().with_classes(kind.num_classes())).map_err(e2s)?;
    let mut cfg = TrainConfig::downstream(TrainRegime::standard(), 53).with_epochs(12);
    cfg.schedule = LrSchedule::constant(0.02, 12);
    cfg.batch_size = 32;
    let out = train(&model, model.init(54), None, &train_ds, None, &cfg).map_err(e2s)?;
    Ok((model, out.params, test))
}

fn c5_zero_radius(desk: &(Model, ParamSet, ticketlab::data::Dataset)) -> Check {
    let (model, params, test) = desk;
    let net = model.subnetwork(params, None);
    let sa = standard_accuracy(&net, test).map_err(e2s)?;
    let mut parts = vec![format!("SA {sa:.3}")];
    for steps in [1, 20] {
        let cfg = AttackConfig::pgd(steps).with_epsilon(0.0);
        let ra = robust_accuracy(&net, test, &cfg, 5).map_err(e2s)?;
        ensure(ra == sa, format!("PGD-{steps} at ε=0: RA {ra} != SA {sa}"))?;
        parts.push(format!("RA(PGD-{steps}, ε=0) {ra:.3}"));
    }
    ensure(sa > 0.5, format!("model barely trained, SA {sa}"))?;
    Ok(parts.join(", "))
}

fn acceptance_config(out: &Path, seeds: Option<Vec<u64>>) -> std::result::Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(workspace().join("configs/acceptance.toml")).map_err(e2s)?;
    cfg.run.out = out.to_path_buf();
    if let Some(s) = seeds {
        cfg.run.seeds = s;
    }
    Ok(cfg)
}

fn run_acceptance(out: &Path, seeds: Option<Vec<u64>>) -> std::result::Result<(), String> {
    let cfg = acceptance_config(out, seeds)?;
    let opts = RunOptions {
        jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        ..RunOptions::default()
    };
    let outcome = run_pipeline(&cfg, &opts).map_err(e2s)?;
    ensure(outcome.summary.success(), format!("pipeline: {:?}", outcome.summary))
}

fn verdicts(out: &Path, prov: &str, method: &str) -> std::result::Result<Vec<VerdictRow>, String> {
    read_csv(&out.join(format!("metrics/verdicts-{prov}-{method}-downstreamA-f1.csv"))).map_err(e2s)
}

fn records_by_level(out: &Path) -> std::result::Result<Vec<ticketlab::experiment::RecordRow>, String> {
    read_csv(&out.join("metrics/records.csv")).map_err(e2s)
}

fn c6_double_win(out: &Path, took: Duration) -> Check {
    let rows = verdicts(out, "AT", "IMP-ST")?;
    let low: Vec<&VerdictRow> = rows.iter().filter(|r| r.sparsity <= 0.4880).collect();
    ensure(low.len() == 3, format!("expected levels k=1..3, found {}", low.len()))?;
    for r in &low {
        ensure(r.double_win, format!("not double-win at {:.2}%", 100.0 * r.sparsity))?;
    }
    // Recompute the one-std rule from the raw records.
    let recs = records_by_level(out)?;
    let pick = |method: &str, level: u32, regime: &str, ra: bool| -> Vec<f64> {
        recs.iter()
            .filter(|r| r.pretrain == Provenance::At && r.method == method && r.level == level && r.regime.as_str() == regime)
            .map(|r| if ra { r.ra } else { r.sa })
            .collect()
    };
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    };
    for level in 1..=3 {
        for (regime, ra) in [("ST", false), ("AT", false), ("AT", true)] {
            let sub = pick("IMP-ST", level, regime, ra);
            let dense = pick("dense", 0, regime, ra);
            ensure(sub.len() == 3 && dense.len() == 3, "need 3 seeds per cell")?;
            let ((ms, _), (md, sd)) = (stats(&sub), stats(&dense));
            ensure(ms >= md - sd - 1e-12, format!("k={level} {regime}{}: {ms:.3} < {md:.3} − {sd:.3}", if ra { "-RA" } else { "-SA" }))?;
        }
    }
    let ra: Vec<String> = low.iter().map(|r| format!("{:.1}%:{:.3}", 100.0 * r.sparsity, r.at_ra_mean)).collect();
    Ok(format!("double-win at k=1..3 (AT-RA {}), pipeline {:.0}s", ra.join(" "), took.as_secs_f64()))
}

fn c7_once(out: &Path) -> std::result::Result<(bool, String), String> {
    let mut ok = true;
    let mut parts = Vec::new();
    for prov in ["AT", "STD"] {
        let imp = verdicts(out, prov, "IMP-ST")?;
        let rp = verdicts(out, prov, "RP")?;
        ensure(rp.len() == 2, format!("{prov}: expected 2 RP levels, found {}", rp.len()))?;
        for r in &rp {
            ensure(r.sparsity >= 0.8322, format!("RP level {:.4} below 83.22%", r.sparsity))?;
            let i = imp
                .iter()
                .find(|v| (v.sparsity - r.sparsity).abs() < 1e-3)
                .ok_or("no IMP level matching an RP level")?;
            ok &= i.at_ra_mean >= r.at_ra_mean;
            parts.push(format!("{prov} {:.1}%: {:.3} vs {:.3}", 100.0 * r.sparsity, i.at_ra_mean, r.at_ra_mean));
        }
    }
    Ok((ok, parts.join(", ")))
}

fn c7_imp_vs_random(out: &Path) -> Check {
    let (ok, msg) = c7_once(out)?;
    if ok {
        return Ok(format!("AT-RA IMP vs RP: {msg}"));
    }
    let rerun = scratch_dir("acceptance-fresh-seeds");
    run_acceptance(&rerun, Some(vec![3, 4, 5]))?;
    let (ok2, msg2) = c7_once(&rerun)?;
    if ok2 {
        Ok(format!("violated on seeds 0-2 ({msg}); holds on fresh seeds 3-5: {msg2}"))
    } else {
        Err(format!("seeds 0-2: {msg}; seeds 3-5: {msg2}"))
    }
}

fn c8_pretrain_order(out: &Path) -> Check {
    let rows: Vec<ExtremeRow> = read_csv(&out.join("metrics/extreme-sparsity.csv")).map_err(e2s)?;
    let get = |p: &str| {
        rows.iter()
            .find(|r| r.pretrain == p && r.method == "IMP-ST")
            .map(|r| r.extreme_sparsity)
            .ok_or(format!("no extreme-sparsity row for {p}"))
    };
    let (at, std) = (get("AT")?, get("STD")?);
    ensure(at >= std, format!("θ_AT {at:.4} < θ_STD {std:.4}"))?;
    Ok(format!("extreme sparsity θ_AT {:.2}% ≥ θ_STD {:.2}%", 100.0 * at, 100.0 * std))
}

fn c9_mask_oracles() -> Check {
    let model = common::small_model(4);
    let reg = model.registry();
    let mut rng = seed::stream(9, "mask-oracles");
    let as_set = |m: &Mask| -> HashSet<(String, usize)> {
        m.tensors()
            .flat_map(|(n, b)| b.iter().enumerate().filter(|e| *e.1).map(move |(i, _)| (n.to_owned(), i)))
            .collect()
    };
    for i in 0..100 {
        let a = random_mask(&model, &mut rng, None);
        let b = random_mask(&model, &mut rng, None);
        let (sa, sb) = (as_set(&a), as_set(&b));
        let union = sa.union(&sb).count();
        let want = if union == 0 { 1.0 } else { sa.intersection(&sb).count() as f64 / union as f64 };
        let got = relative_similarity(&a, &b).map_err(e2s)?;
        ensure(got == want, format!("case {i}: similarity {got} vs set arithmetic {want}"))?;

        let census = zero_kernel_census(&a, reg).map_err(e2s)?;
        let mut brute = 0;
        let mut kernels = 0;
        for (name, bits) in a.tensors() {
            let shape = reg.shape(name).unwrap();
            let area = shape[2] * shape[3];
            for k in 0..shape[0] * shape[1] {
                kernels += 1;
                brute += bits[k * area..(k + 1) * area].iter().all(|&x| !x) as usize;
            }
        }
        ensure(census.zero_kernels() == brute && census.total_kernels() == kernels, format!("case {i}: census mismatch"))?;
    }
    let mut worst: f64 = 0.0;
    for s in [0.2, 0.488, 0.832, 0.893] {
        let masks: Vec<Mask> = (0..3)
            .map(|k| random_prune(seed::substream(90, &format!("rp{k}")), s, reg))
            .collect::<ticketlab::Result<_>>()
            .map_err(e2s)?;
        let mut pair = Vec::new();
        for x in 0..3 {
            for y in x + 1..3 {
                pair.push(relative_similarity(&masks[x], &masks[y]).map_err(e2s)?);
            }
        }
        let observed = pair.iter().sum::<f64>() / pair.len() as f64;
        // Simulated: per-tensor uniform subsets of the same sizes.
        let trials = 300;
        let mut sim = 0.0;
        for _ in 0..trials {
            let (mut inter, mut union) = (0usize, 0usize);
            for name in reg.prunable() {
                let n = reg.numel(name);
                let keep = n - round_half_up(s * n as f64).min(n);
                let p: HashSet<usize> = sample(&mut rng, n, keep).into_iter().collect();
                let q: HashSet<usize> = sample(&mut rng, n, keep).into_iter().collect();
                inter += p.intersection(&q).count();
                union += p.union(&q).count();
            }
            sim += inter as f64 / union as f64;
        }
        let expected = sim / trials as f64;
        worst = worst.max((observed - expected).abs());
        ensure((observed - expected).abs() <= 0.05, format!("s={s}: RP similarity {observed:.4} vs simulated {expected:.4}"))?;
    }
    Ok(format!("similarity and census exact on 100 masks, RP similarity within {worst:.4} of simulation"))
}

fn c10_surface(desk: &(Model, ParamSet, ticketlab::data::Dataset)) -> Check {
    let (model, params, test) = desk;
    let (x, y) = test.batch(&(0..64).collect::<Vec<_>>());
    let mut rng = seed::stream(10, "surface");
    let mut worst: f64 = 0.0;
    for (i, mask) in [None, Some(random_mask(model, &mut rng, Some(0.4)))].iter().enumerate() {
        let tensors = match mask {
            Some(m) => params.masked(m),
            None => params.clone(),
        };
        for attack in [None, Some(AttackConfig::pgd(3))] {
            let opts = SurfaceOptions { resolution: 7, seed: 70 + i as u64, attack, reattack: false };
            let grid = loss_surface_grid(model, params, mask.as_ref(), (&x, &y), "acc", &opts).map_err(e2s)?;
            if attack.is_none() {
                let direct = batch_loss(model, params, mask.as_ref(), &x, &y).map_err(e2s)?;
                ensure(grid.center().to_bits() == direct.to_bits(), format!("center {} vs loss {direct}", grid.center()))?;
            }
        }
        let d = filter_normalized_direction(params, mask.as_ref(), 71);
        for (name, t) in tensors.iter() {
            if !name.ends_with(".weight") {
                continue;
            }
            // Conv slices are single (out, in) kernels, linear slices are rows.
            let len: usize = t.shape()[t.shape().len().min(4) / 2..].iter().product();
            for (k, (a, b)) in t.data().chunks(len).zip(d[name].data().chunks(len)).enumerate() {
                let na = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                if na == 0.0 {
                    ensure(nb == 0.0, format!("{name} slice {k}: direction should vanish"))?;
                    continue;
                }
                let rel = (na - nb).abs() / na;
                worst = worst.max(rel);
                ensure(rel <= 1e-6, format!("{name} slice {k}: norm {nb} vs {na}"))?;
            }
        }
    }
    Ok(format!("center bitwise equal to the batch loss, slice norms within {worst:.1e} relative"))
}

/// Child side of the fault-injection check: rewrite one checkpoint path with
/// a new generation forever until killed.
fn writer_child(path: &Path) -> ! {
    let model = common::small_model(8);
    let mut p = model.init(1);
    p.freeze_anchor(Provenance::Std).unwrap();
    let mut generation = 0f32;
    loop {
        generation += 1.0;
        let t = p.tensors().iter().map(|(n, t)| (n.clone(), Tensor::full(t.shape(), generation))).collect();
        save_checkpoint(&p.with_tensors(t).unwrap(), path).unwrap();
        let mask = Mask::full(model.registry(), PruneMethod::ImpSt, Provenance::Std);
        save_mask(&mask, path.with_extension("mask")).unwrap();
    }
}

fn c11_serialization() -> Check {
    let dir = scratch_dir("serialization");
    let model = common::small_model(4);
    let mut rng = seed::stream(11, "serialization");
    for i in 0..20 {
        let prov = Provenance::ALL[i % 3];
        let p = drifted(&model, 200 + i as u64, prov);
        let path = dir.join(format!("c{i}.ckpt"));
        save_checkpoint(&p, &path).map_err(e2s)?;
        ensure(same_bits(&p, &load_checkpoint(&path).map_err(e2s)?), format!("checkpoint {i} roundtrip differs"))?;
        let mut m = random_mask(&model, &mut rng, None);
        if i % 2 == 0 {
            m = Mask::new(m.tensors().map(|(n, b)| (n.to_owned(), b.to_vec())).collect(), i as u32, PruneMethod::ImpAt, prov);
        }
        let mpath = dir.join(format!("m{i}.mask"));
        save_mask(&m, &mpath).map_err(e2s)?;
        ensure(load_mask(&mpath).map_err(e2s)? == m, format!("mask {i} roundtrip differs"))?;
    }

    let target = dir.join("victim.ckpt");
    let exe = std::env::current_exe().map_err(e2s)?;
    let mut observed = 0;
    for k in 0..15u64 {
        let mut child = Command::new(&exe).env(CHILD_ENV, &target).spawn().map_err(e2s)?;
        std::thread::sleep(Duration::from_millis(30 + 17 * k));
        child.kill().map_err(e2s)?;
        child.wait().map_err(e2s)?;
        if target.exists() {
            let c = load_checkpoint(&target).map_err(|e| format!("kill {k}: final checkpoint corrupt: {e}"))?;
            let g = c.tensors().values().next().unwrap().data()[0];
            ensure(c.tensors().values().all(|t| t.data().iter().all(|&v| v == g)), format!("kill {k}: mixed generations"))?;
            load_mask(target.with_extension("mask")).map_err(|e| format!("kill {k}: final mask corrupt: {e}"))?;
            observed += 1;
        }
    }
    ensure(observed > 0, "writer never produced a file")?;
    Ok("20 checkpoint + 20 mask roundtrips bitwise, 15 SIGKILLs mid-write left only valid artifacts".to_string())
}

fn c12_reproducible() -> Check {
    let mut outs = Vec::new();
    for tag in ["a", "b"] {
        let dir = scratch_dir(&format!("minimal-{tag}"));
        let mut cfg = ExperimentConfig::load(workspace().join("configs/minimal.toml")).map_err(e2s)?;
        cfg.run.out = dir.clone();
        let r = run_pipeline(&cfg, &RunOptions::default()).map_err(e2s)?;
        ensure(r.summary.success(), format!("minimal run {tag}: {:?}", r.summary))?;
        outs.push(dir);
    }
    let list = |d: &Path| -> std::result::Result<Vec<PathBuf>, String> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(d.join("metrics"))
            .map_err(e2s)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        Ok(v)
    };
    let (a, b) = (list(&outs[0])?, list(&outs[1])?);
    ensure(!a.is_empty() && a.len() == b.len(), "metric file sets differ")?;
    for (p, q) in a.iter().zip(&b) {
        ensure(p.file_name() == q.file_name(), "metric file names differ")?;
        ensure(std::fs::read(p).map_err(e2s)? == std::fs::read(q).map_err(e2s)?, format!("{} differs", p.display()))?;
    }
    Ok(format!("{} metrics CSVs bitwise identical across two runs", a.len()))
}

fn main() -> ExitCode {
    if let Some(path) = std::env::var_os(CHILD_ENV) {
        writer_child(Path::new(&path));
    }
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Check| {
        match r {
            Ok(msg) => println!("PASS {n:>2} {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {msg}");
            }
        }
    };
    report(1, "gradient correctness", c1_gradients());
    report(2, "PGD linear-model oracle", c2_pgd_oracle());
    report(3, "IMP level ladder", c3_ladder());
    report(4, "rewind exactness", c4_rewind());
    let desk = trained_desk_model();
    match &desk {
        Ok(d) => report(5, "RA(ε=0) == SA", c5_zero_radius(d)),
        Err(e) => report(5, "RA(ε=0) == SA", Err(e.clone())),
    }
    let out = scratch_dir("acceptance-run");
    let t = Instant::now();
    match run_acceptance(&out, None) {
        Ok(()) => {
            let took = t.elapsed();
            report(6, "desk-scale double-win existence", c6_double_win(&out, took));
            report(7, "IMP beats random pruning", c7_imp_vs_random(&out));
            report(8, "pretraining ordering", c8_pretrain_order(&out));
        }
        Err(e) => {
            for (n, name) in [(6, "desk-scale double-win existence"), (7, "IMP beats random pruning"), (8, "pretraining ordering")] {
                report(n, name, Err(format!("acceptance pipeline failed: {e}")));
            }
        }
    }
    report(9, "mask analytics oracles", c9_mask_oracles());
    match &desk {
        Ok(d) => report(10, "loss-surface anchors", c10_surface(d)),
        Err(e) => report(10, "loss-surface anchors", Err(e.clone())),
    }
    report(11, "serialization", c11_serialization());
    report(12, "end-to-end reproducibility", c12_reproducible());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}

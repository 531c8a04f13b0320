use std::path::{Path, PathBuf};
use std::process::Command;

use ticketlab::config::ExperimentConfig;
use ticketlab::eval::{baselines_from, MetricRecord, VerdictCurve, VerdictRow};
use ticketlab::experiment::{plan, run_pipeline, transfer_keys, MaskSpec, RecordRow, RunManifest, RunOptions, StageKind};
use ticketlab::mask::PruneMethod;
use ticketlab::report::{read_csv, read_json};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn minimal_in(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(config("minimal.toml")).unwrap();
    cfg.run.out = dir.to_path_buf();
    cfg
}

#[test]
fn full_config_enumerates_the_declared_grid() {
    let cfg = ExperimentConfig::load(config("full.toml")).unwrap();
    let keys = transfer_keys(&cfg);
    let pruned: Vec<_> = keys.iter().filter(|k| k.spec != MaskSpec::Dense).collect();
    assert_eq!(pruned.len(), 3 * 2 * 6 * 2 * 3);
    assert_eq!(keys.len() - pruned.len(), 3 * 2 * 3);
    for m in [PruneMethod::ImpSt, PruneMethod::Rp] {
        assert_eq!(pruned.iter().filter(|k| k.spec.method() == Some(m)).count(), 108);
    }
    let stages = plan(&cfg);
    let mut keys: Vec<&str> = stages.iter().map(|s| s.key.as_str()).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), stages.len(), "stage keys must be unique");
    // Every dependency is planned, and points at an earlier stage kind.
    for s in &stages {
        for d in &s.deps {
            let dep = stages.iter().find(|x| &x.key == d).unwrap_or_else(|| panic!("{} needs unplanned {d}", s.key));
            assert!(dep.kind <= s.kind);
        }
    }
    for other in ["minimal.toml", "acceptance.toml"] {
        assert!(ExperimentConfig::load(config(other)).is_ok());
    }
}

#[test]
fn minimal_run_resume_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_in(dir.path());
    let first = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert!(first.summary.success(), "{:?}", first.summary);
    let total = first.manifest.stages.len();
    assert_eq!(first.summary.executed, total);

    // Manifest: every stage complete, every artifact on disk.
    let m = RunManifest::load(dir.path()).unwrap();
    assert_eq!(m.config_hash, cfg.hash().unwrap());
    for (key, rec) in &m.stages {
        assert!(rec.completed && rec.error.is_none(), "{key}");
        for a in &rec.artifacts {
            assert!(dir.path().join(a).exists(), "{key}: {a} missing");
        }
    }
    assert!(dir.path().join("config.toml").exists());

    let out = dir.path().join("metrics");
    let rows: Vec<VerdictRow> = read_csv(&out.join("verdicts-AT-IMP-ST-downstreamA-f1.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    let json: Vec<VerdictRow> = read_json(&out.join("verdicts-AT-IMP-ST-downstreamA-f1.json")).unwrap();
    assert_eq!(rows.len(), json.len());
    for (a, b) in rows.iter().zip(&json) {
        assert_eq!(a.double_win, b.double_win);
        assert!((a.at_ra_mean - b.at_ra_mean).abs() < 1e-12 && (a.sparsity - b.sparsity).abs() < 1e-12);
    }

    // Verdicts rebuilt from records.csv agree with the emitted table.
    let recs: Vec<RecordRow> = read_csv(&out.join("records.csv")).unwrap();
    assert_eq!(recs.len(), 3 * 3 * 2);
    let all: Vec<MetricRecord> = recs.iter().map(|r| r.record()).collect();
    let base = baselines_from(&all).unwrap();
    let curve = VerdictCurve::build(&all.iter().filter(|r| r.sparsity > 0.0).cloned().collect::<Vec<_>>(), &base).unwrap();
    for (a, b) in curve.rows().iter().zip(&rows) {
        assert_eq!(a.double_win, b.double_win);
        for (x, y) in [(a.st_sa_mean, b.st_sa_mean), (a.at_sa_std, b.at_sa_std), (a.at_ra_mean, b.at_ra_mean)] {
            assert!((x - y).abs() < 1e-12);
        }
    }

    let resumed = run_pipeline(&cfg, &RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert_eq!(resumed.summary.executed, 0);
    assert_eq!(resumed.summary.skipped, total);

    // A lost artifact re-runs just its stage, and the rebuilt file is identical.
    let victim = m.stages.iter().find(|(k, _)| k.starts_with("transfer/")).unwrap();
    let lost = dir.path().join(&victim.1.artifacts[0]);
    let before = std::fs::read(&lost).unwrap();
    std::fs::remove_file(&lost).unwrap();
    let healed = run_pipeline(&cfg, &RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert!(healed.summary.success());
    assert_eq!(healed.summary.executed, 1, "{:?}", healed.summary);
    assert_eq!(std::fs::read(&lost).unwrap(), before);

    // Sub-verb: redo the reports only.
    let rep = run_pipeline(&cfg, &RunOptions { verb: Some(StageKind::Report), ..RunOptions::default() }).unwrap();
    assert_eq!(rep.summary.executed, m.stages_of(StageKind::Report).count());

    // A different config cannot resume into this directory.
    let mut changed = cfg.clone();
    changed.run.root_seed += 1;
    assert!(run_pipeline(&changed, &RunOptions { resume: true, ..RunOptions::default() }).is_err());
    assert!(m.history.len() <= RunManifest::load(dir.path()).unwrap().history.len());
}

#[test]
fn cli_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_ticketlab");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = Command::new(exe)
        .args(["run", "--config"])
        .arg(config("minimal.toml"))
        .arg("--out")
        .arg(&out)
        .args(["--seeds", "4,5,6", "--jobs", "2"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("failed 0"), "{stdout}");
    let recs: Vec<RecordRow> = read_csv(&out.join("metrics/records.csv")).unwrap();
    assert!(recs.iter().all(|r| [4, 5, 6].contains(&r.seed)));

    let again = Command::new(exe)
        .args(["report", "--resume", "--config"])
        .arg(config("minimal.toml"))
        .arg("--out")
        .arg(&out)
        .args(["--seeds", "4,5,6", "--kind", "verdicts"])
        .output()
        .unwrap();
    assert_eq!(again.status.code(), Some(0), "{}", String::from_utf8_lossy(&again.stderr));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[run]\nname = 1\n").unwrap();
    let r = Command::new(exe).args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
    let missing = Command::new(exe).args(["run", "--config", "/nonexistent.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

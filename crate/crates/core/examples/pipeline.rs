//! Runs the minimal config end to end into a temp directory, resumes it, and
//! prints the verdict table.

use std::path::Path;

use ticketlab::config::ExperimentConfig;
use ticketlab::eval::VerdictRow;
use ticketlab::experiment::{run_pipeline, RunOptions};
use ticketlab::report::read_csv;

fn main() -> ticketlab::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/minimal.toml");
    let mut cfg = ExperimentConfig::load(&path)?;
    cfg.run.out = std::env::temp_dir().join("ticketlab-minimal");
    let opts = RunOptions { verbose: true, ..RunOptions::default() };
    let first = run_pipeline(&cfg, &opts)?;
    println!("first run: {:?}", first.summary);
    let again = run_pipeline(&cfg, &RunOptions { resume: true, ..opts })?;
    println!("resumed:   {:?}", again.summary);

    let table = cfg.run.out.join("metrics/verdicts-AT-IMP-ST-downstreamA-f1.csv");
    let rows: Vec<VerdictRow> = read_csv(&table)?;
    for r in rows {
        println!(
            "{:.2}%: ST-SA {:.3}, AT-SA {:.3}, AT-RA {:.3}, double-win {}",
            100.0 * r.sparsity,
            r.st_sa_mean,
            r.at_sa_mean,
            r.at_ra_mean,
            r.double_win
        );
    }
    println!("artifacts under {}", cfg.run.out.display());
    Ok(())
}

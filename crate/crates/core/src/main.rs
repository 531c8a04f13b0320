use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ticketlab::config::ExperimentConfig;
use ticketlab::experiment::{run_pipeline, RunOptions, StageKind};
use ticketlab::report::ReportKind;

#[derive(Parser)]
#[command(name = "ticketlab", version, about = "Sparse-subnetwork transfer experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Pre-train the source anchors.
    Pretrain(Common),
    /// Build masks (IMP, one-shot, random).
    Imp(Common),
    /// Fine-tune on the downstream tasks.
    Transfer(Common),
    /// Standard and robust test accuracy of every transfer.
    Evaluate(Common),
    /// Mask similarity, kernel census, loss surfaces.
    Analyze(Common),
    /// Emit CSV/JSON tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        kind: Vec<String>,
    },
    /// The whole pipeline.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Skip stages the manifest marks complete.
    #[arg(long)]
    resume: bool,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> ticketlab::Result<bool> {
    let cli = Cli::parse();
    let (verb, common, kinds) = match cli.verb {
        Verb::Pretrain(c) => (Some(StageKind::Pretrain), c, None),
        Verb::Imp(c) => (Some(StageKind::Imp), c, None),
        Verb::Transfer(c) => (Some(StageKind::Transfer), c, None),
        Verb::Evaluate(c) => (Some(StageKind::Evaluate), c, None),
        Verb::Analyze(c) => (Some(StageKind::Analyze), c, None),
        Verb::Report { common, kind } => {
            let kinds = if kind.is_empty() {
                None
            } else {
                Some(kind.iter().map(|k| k.parse()).collect::<ticketlab::Result<Vec<ReportKind>>>()?)
            };
            (Some(StageKind::Report), common, kinds)
        }
        Verb::Run(c) => (None, c, None),
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if !common.seeds.is_empty() {
        cfg.run.seeds = common.seeds;
    }
    if let Some(out) = common.out {
        cfg.run.out = out;
    }
    cfg.validate()?;
    let opts = RunOptions {
        verb,
        resume: common.resume,
        jobs: common.jobs,
        reports: kinds,
        verbose: true,
    };
    let outcome = run_pipeline(&cfg, &opts)?;
    let s = &outcome.summary;
    println!(
        "executed {} skipped {} failed {} blocked {}",
        s.executed, s.skipped, s.failed, s.blocked
    );
    for (key, rec) in &outcome.manifest.stages {
        if let Some(e) = &rec.error {
            println!("  {key}: {e}");
        }
    }
    Ok(s.success())
}

//! Builds verdict curves from hand-written metric records: matching against
//! the dense baseline within one std, the double-win conjunction and the
//! extreme sparsity.

use ticketlab::eval::{baselines_from, extreme_sparsity, MetricRecord, VerdictCurve};
use ticketlab::model::Provenance;
use ticketlab::train::RegimeTag;

fn rec(regime: RegimeTag, sparsity: f64, seed: u64, sa: f64, ra: f64) -> MetricRecord {
    MetricRecord { pretrain: Provenance::At, method: None, sparsity, regime, data_fraction: 1.0, seed, sa, ra }
}

fn main() -> ticketlab::Result<()> {
    let mut records = Vec::new();
    let levels = [0.2, 0.36, 0.488, 0.5904, 0.6723];
    for seed in 0..3u64 {
        let jitter = 0.01 * seed as f64;
        records.push(rec(RegimeTag::St, 0.0, seed, 0.90 + jitter, 0.0));
        records.push(rec(RegimeTag::At, 0.0, seed, 0.80 + jitter, 0.50 + jitter));
        for (k, &s) in levels.iter().enumerate() {
            let drop = 0.015 * k as f64 * k as f64;
            records.push(rec(RegimeTag::St, s, seed, 0.91 + jitter - drop, 0.0));
            records.push(rec(RegimeTag::At, s, seed, 0.81 + jitter - drop, 0.51 + jitter - drop));
        }
    }
    let baselines = baselines_from(&records)?;
    for (regime, b) in &baselines {
        println!("dense {regime}: SA {:.3}±{:.3} RA {:.3}±{:.3}", b.sa_mean, b.sa_std, b.ra_mean, b.ra_std);
    }
    let sparse: Vec<MetricRecord> = records.iter().filter(|r| r.sparsity > 0.0).cloned().collect();
    let curve = VerdictCurve::build(&sparse, &baselines)?;
    for r in curve.rows() {
        println!(
            "{:>6.2}%  ST-SA {:.3} {}  AT-SA {:.3} {}  AT-RA {:.3} {}  double-win {}",
            100.0 * r.sparsity,
            r.st_sa_mean,
            r.st_sa_matching,
            r.at_sa_mean,
            r.at_sa_matching,
            r.at_ra_mean,
            r.at_ra_matching,
            r.double_win
        );
    }
    println!("extreme sparsity {:.2}%", 100.0 * extreme_sparsity(&curve));
    Ok(())
}

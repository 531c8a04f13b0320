//! Loss surface around a trained model along two filter-normalized
//! directions, clean and under PGD, plus the training trajectory projection.

use ticketlab::analytics::{loss_surface_grid, trajectory_projection, SurfaceOptions};
use ticketlab::attack::AttackConfig;
use ticketlab::data::{synthesize_task, TaskKind};
use ticketlab::model::{Model, ModelConfig};
use ticketlab::optim::LrSchedule;
use ticketlab::train::{train, TrainConfig, TrainRegime};

fn main() -> ticketlab::Result<()> {
    let kind = TaskKind::DownstreamA;
    let ds = synthesize_task(kind, 40, 1)?;
    let model = Model::new(ModelConfig::default().with_classes(kind.num_classes()))?;
    let mut cfg = TrainConfig::downstream(TrainRegime::standard(), 2).with_epochs(6);
    cfg.schedule = LrSchedule::constant(0.02, 6);
    cfg.batch_size = 32;
    let out = train(&model, model.init(3), None, &ds, None, &cfg)?;

    let (x, y) = ds.batch(&(0..64).collect::<Vec<_>>());
    for attack in [None, Some(AttackConfig::pgd(5))] {
        let opts = SurfaceOptions { resolution: 7, seed: 4, attack, reattack: false };
        let grid = loss_surface_grid(&model, &out.params, None, (&x, &y), "train[0..64]", &opts)?;
        println!("{} surface, center {:.4}:", if grid.attacked { "PGD" } else { "clean" }, grid.center());
        for i in 0..grid.resolution {
            let row: Vec<String> = (0..grid.resolution).map(|j| format!("{:7.3}", grid.at(i, j))).collect();
            println!("  {}", row.join(" "));
        }
    }
    let traj = trajectory_projection(&out.snapshots, None)?;
    for (e, (a, b)) in traj.coords.iter().enumerate() {
        println!("epoch {}: ({a:+.4}, {b:+.4})", e + 1);
    }
    Ok(())
}

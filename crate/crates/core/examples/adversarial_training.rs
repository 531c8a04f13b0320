//! Standard, fast-adversarial and PGD adversarial training on downstream
//! task A; prints the per-epoch log and the final SA / RA of each.

use ticketlab::attack::AttackConfig;
use ticketlab::data::{split_validation, synthesize_task, Split, TaskKind};
use ticketlab::eval::{robust_accuracy, standard_accuracy};
use ticketlab::model::{Model, ModelConfig};
use ticketlab::optim::LrSchedule;
use ticketlab::train::{train, TrainConfig, TrainRegime};

fn main() -> ticketlab::Result<()> {
    let kind = TaskKind::DownstreamA;
    let (train_ds, val) = split_validation(&synthesize_task(kind, 60, 1)?, 0.1, 2)?;
    let test = synthesize_task(kind, 40, 3)?.with_split(Split::Test);
    let model = Model::new(ModelConfig::default().with_classes(kind.num_classes()))?;
    for regime in [TrainRegime::standard(), TrainRegime::fast(), TrainRegime::adversarial(3)] {
        let mut cfg = TrainConfig::downstream(regime, 4).with_epochs(8);
        cfg.schedule = LrSchedule::step_decay(0.02, vec![6], 8);
        cfg.batch_size = 32;
        cfg.val_attack = AttackConfig::pgd(3);
        let out = train(&model, model.init(5), None, &train_ds, Some(&val), &cfg)?;
        let best = out.early_stopped(regime.tag)?;
        let net = model.subnetwork(best, None);
        let sa = standard_accuracy(&net, &test)?;
        let ra = robust_accuracy(&net, &test, &AttackConfig::pgd(10), 6)?;
        println!("{}: {} gradient passes", regime.tag, out.backward_passes);
        for e in &out.log {
            println!("  epoch {:>2} loss {:.3} val SA {:?} val RA {:?}", e.epoch, e.train_loss, e.val_sa, e.val_ra);
        }
        println!("  early-stopped test SA {sa:.3} RA {ra:.3}");
    }
    Ok(())
}

//! Attacks a briefly trained classifier with FGSM and PGD at growing step
//! counts and reports robust accuracy.

use ticketlab::attack::AttackConfig;
use ticketlab::data::{synthesize_task, Split, TaskKind};
use ticketlab::eval::{robust_accuracy, standard_accuracy};
use ticketlab::model::{Model, ModelConfig};
use ticketlab::optim::LrSchedule;
use ticketlab::train::{train, TrainConfig, TrainRegime};

fn main() -> ticketlab::Result<()> {
    let kind = TaskKind::DownstreamA;
    let train_ds = synthesize_task(kind, 60, 1)?;
    let test = synthesize_task(kind, 40, 2)?.with_split(Split::Test);
    let model = Model::new(ModelConfig::default().with_classes(kind.num_classes()))?;
    let mut cfg = TrainConfig::downstream(TrainRegime::standard(), 3).with_epochs(10);
    cfg.schedule = LrSchedule::constant(0.02, 10);
    cfg.batch_size = 32;
    let out = train(&model, model.init(4), None, &train_ds, None, &cfg)?;
    let net = model.subnetwork(&out.params, None);

    println!("SA {:.3}", standard_accuracy(&net, &test)?);
    println!("FGSM (rs) RA {:.3}", robust_accuracy(&net, &test, &AttackConfig::fast(), 5)?);
    for steps in [1, 5, 10, 20] {
        let ra = robust_accuracy(&net, &test, &AttackConfig::pgd(steps), 5)?;
        println!("PGD-{steps:<2} RA {ra:.3}");
    }
    Ok(())
}

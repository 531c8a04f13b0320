//! IMP with rewinding on the source task: each round retrains from the anchor
//! under the current mask, then drops 20% of the surviving conv weights.

use ticketlab::data::{synthesize_task, TaskKind};
use ticketlab::model::{Model, ModelConfig};
use ticketlab::optim::LrSchedule;
use ticketlab::prune::{imp_ladder, imp_run, one_shot_prune};
use ticketlab::train::{pretrain_source, TrainConfig, TrainRegime};

fn main() -> ticketlab::Result<()> {
    let src = synthesize_task(TaskKind::Source, 30, 1)?;
    let model = Model::new(ModelConfig::default())?;
    let mut pre = TrainConfig::downstream(TrainRegime::standard(), 2).with_epochs(4);
    pre.schedule = LrSchedule::constant(0.05, 4);
    pre.batch_size = 32;
    let (anchor, _) = pretrain_source(&model, &src, None, &pre)?;

    let mut retrain = TrainConfig::imp_retrain(TrainRegime::standard(), 3).with_epochs(1);
    retrain.schedule = LrSchedule::constant(0.01, 1);
    let rounds = 6;
    let out = imp_run(&model, &anchor, rounds, &retrain, &src, None)?;
    let total = model.registry().total_prunable();
    for (mask, log) in out.masks.iter().zip(&out.logs) {
        println!(
            "round {:>2}: sparsity {:.4} (ladder {:.4}), cut |w| <= {:.4}, retrain loss {:.3}",
            log.round,
            mask.sparsity(),
            imp_ladder(total, log.round),
            log.threshold_magnitude,
            log.retrain_loss
        );
    }
    let omp = one_shot_prune(&anchor, model.registry(), out.masks.last().unwrap().sparsity())?;
    println!("one-shot at the same sparsity keeps {} of {total} weights", omp.kept());
    Ok(())
}

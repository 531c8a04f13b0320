//! Mask similarity across anchors, zero-kernel census and a kernel heatmap
//! export, on masks from magnitude and random pruning.

use ticketlab::analytics::{kernel_heatmap_export, relative_similarity, zero_kernel_census};
use ticketlab::model::{Model, ModelConfig, Provenance};
use ticketlab::prune::{one_shot_prune, random_prune};

fn main() -> ticketlab::Result<()> {
    let model = Model::new(ModelConfig::default())?;
    let reg = model.registry();
    let mut a = model.init(1);
    a.freeze_anchor(Provenance::Std)?;
    let mut b = model.init(2);
    b.freeze_anchor(Provenance::At)?;
    for s in [0.2, 0.5904, 0.8926] {
        let ma = one_shot_prune(&a, reg, s)?;
        let mb = one_shot_prune(&b, reg, s)?;
        let r1 = random_prune(10, s, reg)?;
        let r2 = random_prune(11, s, reg)?;
        let census = zero_kernel_census(&ma, reg)?;
        println!(
            "s={s:.4}: magnitude sim {:.3}, random sim {:.3} (expect {:.3}), zero kernels {}/{}",
            relative_similarity(&ma, &mb)?,
            relative_similarity(&r1, &r2)?,
            (1.0 - s) / (1.0 + s),
            census.zero_kernels(),
            census.total_kernels()
        );
        for t in &census.tensors {
            println!("    stage {} {}: {}/{}", t.stage, t.name, t.zero_kernels, t.total_kernels);
        }
    }
    let path = std::env::temp_dir().join("ticketlab-heatmap.csv");
    kernel_heatmap_export(&one_shot_prune(&a, reg, 0.8926)?, reg, &path)?;
    println!("heatmap written to {}", path.display());
    Ok(())
}

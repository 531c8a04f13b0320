//! Renders the synthetic source and downstream tasks, prints class balance and
//! an ASCII sample per class, then writes task A as IDX files.

use ticketlab::data::{load_idx, save_idx, split_validation, stratified_subsample, synthesize_task, FractionSpec, Split, TaskKind, SIDE};

fn main() -> ticketlab::Result<()> {
    for kind in [TaskKind::Source, TaskKind::DownstreamA, TaskKind::DownstreamB] {
        let ds = synthesize_task(kind, 20, 1)?;
        println!("{kind}: {} images, {} classes, counts {:?}", ds.len(), ds.num_classes(), ds.class_counts());
    }
    let a = synthesize_task(TaskKind::DownstreamA, 20, 1)?;
    for class in 0..a.num_classes() {
        let i = a.labels().iter().position(|&y| y == class).unwrap();
        println!("class {class}:");
        let img = &a.images().data()[i * SIDE * SIDE..(i + 1) * SIDE * SIDE];
        for row in img.chunks(SIDE) {
            let line: String = row.iter().map(|&v| if v > 0.55 { '#' } else if v > 0.35 { '+' } else { '.' }).collect();
            println!("  {line}");
        }
    }
    let tenth = stratified_subsample(&a, FractionSpec { fraction: 0.1, seed: 3 })?;
    let (train, val) = split_validation(&a, 0.1, 4)?;
    println!("10% subsample: {:?}; train/val split {} / {}", tenth.class_counts(), train.len(), val.len());

    let dir = std::env::temp_dir().join("ticketlab-idx");
    save_idx(&a, dir.join("images.idx"), dir.join("labels.idx"))?;
    let back = load_idx(dir.join("images.idx"), dir.join("labels.idx"), Split::Train)?;
    println!("IDX roundtrip in {}: {} images", dir.display(), back.len());
    Ok(())
}

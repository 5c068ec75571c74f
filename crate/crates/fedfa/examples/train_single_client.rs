//! Trains one residual MLP on a synthetic blob task and prints the
//! loss/accuracy trajectory.

use std::collections::BTreeSet;

use fedfa::arch::ArchSpec;
use fedfa::data::{gen_gaussian_blobs, Shard};
use fedfa::model::build_model;
use fedfa::training::{accuracy, local_update, shard_loss};

fn main() -> fedfa::Result<()> {
    let arch = ArchSpec::new(10, 5, vec![(2, 12), (1, 12)], "demo")?;
    let mut model = build_model(&arch, 0)?;
    println!("architecture: {} ({} parameters)", arch.seed_tag, model.param_count());

    // One generation, split class-major: train and test share blob centers
    // but use disjoint noise draws.
    let full = gen_gaussian_blobs(5, 10, 60, 0.7, 42)?;
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..5 {
        train_idx.extend(c * 60..c * 60 + 40);
        test_idx.extend(c * 60 + 40..(c + 1) * 60);
    }
    let train = full.subset(&train_idx)?;
    let test = full.subset(&test_idx)?;
    let all: BTreeSet<usize> = (0..5).collect();
    let shard = Shard { client_id: 0, data: train, active_classes: all };

    println!("epoch  loss    train_acc  test_acc");
    for epoch in 0..15u64 {
        model = local_update(&model, &shard, 1, 0.05, 8, epoch)?;
        let loss = shard_loss(&model, &shard)?;
        let train_acc = accuracy(&model, &shard.data, None)?;
        let test_acc = accuracy(&model, &test, None)?;
        println!("{epoch:>5}  {loss:.4}  {train_acc:.3}      {test_acc:.3}");
    }
    Ok(())
}

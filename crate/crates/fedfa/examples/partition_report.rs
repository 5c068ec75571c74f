//! Splits one synthetic task two ways and prints what each client ends up
//! holding: uniform shards under the iid scheme, narrow class menus under
//! the label-skewed scheme.

use fedfa::data::{gen_gaussian_blobs, partition_iid, partition_noniid, Shard};

fn class_counts(shard: &Shard, n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_classes];
    for &l in &shard.data.labels {
        counts[l] += 1;
    }
    counts
}

fn print_shards(shards: &[Shard], n_classes: usize) {
    println!("client  size  per-class counts");
    for s in shards {
        let counts = class_counts(s, n_classes);
        let rendered: Vec<String> = counts.iter().map(|c| format!("{c:>3}")).collect();
        println!("{:>6}  {:>4}  [{}]", s.client_id, s.data.len(), rendered.join(" "));
    }
}

fn main() -> fedfa::Result<()> {
    let n_classes = 6;
    let ds = gen_gaussian_blobs(n_classes, 8, 40, 0.8, 7)?;
    println!("task: {} samples, {} classes, dim {}", ds.len(), n_classes, 8);
    println!();

    let iid = partition_iid(&ds, 5, 11)?;
    println!("iid split over 5 clients ({} samples unassigned)", iid.remainder.len());
    print_shards(&iid.shards, n_classes);
    println!();

    let skewed = partition_noniid(&ds, 5, 0.33, 11)?;
    println!("label-skewed split, each client sees 2 of the 6 classes");
    print_shards(&skewed.shards, n_classes);
    println!();
    for s in &skewed.shards {
        let classes: Vec<String> = s.active_classes.iter().map(|c| c.to_string()).collect();
        println!("client {} active classes: {{{}}}", s.client_id, classes.join(", "));
    }
    Ok(())
}

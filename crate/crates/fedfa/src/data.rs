//! Synthetic datasets and client partitioning.
//!
//! Classes are Gaussian blobs centered on deterministic unit directions
//! scaled to radius 3. The IID partitioner gives every client all classes
//! with uneven shard sizes whose minimum is at least half the maximum; the
//! pathological partitioner gives every client exactly `ceil(fraction *
//! n_classes)` classes with equal per-class counts, assigned round-robin
//! over a seeded class permutation. Leftover samples go to an explicit
//! remainder pool so shards always stay disjoint.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::{rng_from, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, dim]` feature matrix.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::ShapeError("dataset inputs must be rank-2".into()));
        }
        if inputs.n_rows() != labels.len() {
            return Err(Error::ShapeError(format!(
                "{} input rows but {} labels",
                inputs.n_rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::ShapeError(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.n_cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the rows at `indices` into a new dataset, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::SliceBounds(format!(
                    "row {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            inputs: Tensor::new(vec![indices.len(), dim], data)?,
            labels,
            n_classes: self.n_classes,
        })
    }

    /// Writes the dataset as CSV with header `x0,..,x{d-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let dim = self.dim();
        let header: Vec<String> = (0..dim)
            .map(|j| format!("x{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> =
                self.inputs.row(i).iter().map(|v| format!("{v}")).collect();
            fields.push(format!("{}", self.labels[i]));
            writeln!(out, "{}", fields.join(","))?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// One client's training data plus the classes it is allowed to score.
#[derive(Debug, Clone)]
pub struct Shard {
    pub client_id: usize,
    pub data: Dataset,
    pub active_classes: BTreeSet<usize>,
}

/// Result of partitioning: the shards plus the indices of any samples left
/// over by the equal-count constraints.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Shard>,
    pub remainder: Vec<usize>,
}

/// Samples `n_per_class` points for each of `n_classes` Gaussian blobs in
/// `dim` dimensions. Class `c` is centered on a seeded unit direction scaled
/// by 3.0 with isotropic noise of standard deviation `spread`. Samples are
/// emitted class-major, so labels come out sorted.
pub fn gen_gaussian_blobs(
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || dim == 0 || n_per_class == 0 {
        return Err(Error::BadConfig(format!(
            "blob generator needs positive sizes, got {n_classes} classes, dim {dim}, {n_per_class} per class"
        )));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::BadConfig(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut centers = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mut dir_rng = rng_from(&[stream::BLOB_DIRECTION, seed, c as u64]);
        loop {
            let v: Vec<f64> = (0..dim).map(|_| dir_rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                centers.push(v.into_iter().map(|x| 3.0 * x / norm).collect::<Vec<f64>>());
                break;
            }
        }
    }
    let mut noise_rng = rng_from(&[stream::BLOB_NOISE, seed]);
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in center {
                let z: f64 = noise_rng.sample(StandardNormal);
                data.push(m + spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, n_classes)
}

/// Splits a dataset into `n_clients` IID shards. Every shard contains all
/// classes; shard sizes are drawn uniformly from `[ceil(q/2), q]` with
/// `q = n / n_clients`, which guarantees the smallest shard holds at least
/// half as many samples as the largest. Unassigned samples land in the
/// remainder pool.
pub fn partition_iid(ds: &Dataset, n_clients: usize, seed: u64) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::BadConfig("n_clients must be positive".into()));
    }
    let n = ds.len();
    if n < n_clients {
        return Err(Error::TooFewSamples(format!(
            "{n} samples cannot cover {n_clients} clients"
        )));
    }
    let q = n / n_clients;
    let low = q.div_ceil(2);
    if low < ds.n_classes {
        return Err(Error::TooFewSamples(format!(
            "minimum shard size {low} cannot cover {} classes",
            ds.n_classes
        )));
    }
    let mut rng = rng_from(&[stream::PARTITION, seed]);
    let counts: Vec<usize> = (0..n_clients).map(|_| rng.gen_range(low..=q)).collect();

    // Seeded per-class pools, consumed front to back.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; ds.n_classes];

    let mut shards = Vec::with_capacity(n_clients);
    for (i, &count) in counts.iter().enumerate() {
        let base = count / ds.n_classes;
        let rem = count % ds.n_classes;
        let start = i % ds.n_classes;
        let mut indices = Vec::with_capacity(count);
        for c in 0..ds.n_classes {
            let extra = ((c + ds.n_classes - start) % ds.n_classes < rem) as usize;
            let take = base + extra;
            if cursors[c] + take > pools[c].len() {
                return Err(Error::TooFewSamples(format!(
                    "class {c} exhausted while filling client {i}"
                )));
            }
            indices.extend_from_slice(&pools[c][cursors[c]..cursors[c] + take]);
            cursors[c] += take;
        }
        let data = ds.subset(&indices)?;
        shards.push(Shard {
            client_id: i,
            data,
            active_classes: (0..ds.n_classes).collect(),
        });
    }
    let mut remainder = Vec::new();
    for (c, pool) in pools.iter().enumerate() {
        remainder.extend_from_slice(&pool[cursors[c]..]);
    }
    remainder.sort_unstable();
    Ok(Partition { shards, remainder })
}

/// Number of classes per shard for the pathological partition. The tiny
/// epsilon keeps binary products like `0.2 * 15` from ceiling one class too
/// high.
pub fn noniid_classes_per_shard(n_classes: usize, class_fraction: f64) -> usize {
    let k = ((class_fraction * n_classes as f64) - 1e-9).ceil();
    (k.max(1.0) as usize).min(n_classes)
}

/// Splits a dataset into non-IID shards: each client sees exactly
/// `ceil(class_fraction * n_classes)` classes with equal per-class counts.
/// Classes are assigned round-robin over a seeded permutation, so all
/// classes are covered whenever `n_clients * k >= n_classes`.
pub fn partition_noniid(
    ds: &Dataset,
    n_clients: usize,
    class_fraction: f64,
    seed: u64,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::BadConfig("n_clients must be positive".into()));
    }
    if !(class_fraction > 0.0 && class_fraction <= 1.0) {
        return Err(Error::BadConfig(format!(
            "class_fraction must lie in (0, 1], got {class_fraction}"
        )));
    }
    let nc = ds.n_classes;
    let k = noniid_classes_per_shard(nc, class_fraction);
    let mut rng = rng_from(&[stream::PARTITION, seed]);
    let mut perm: Vec<usize> = (0..nc).collect();
    perm.shuffle(&mut rng);

    let class_sets: Vec<BTreeSet<usize>> = (0..n_clients)
        .map(|i| (0..k).map(|j| perm[(i * k + j) % nc]).collect())
        .collect();
    let mut holders = vec![0usize; nc];
    for set in &class_sets {
        for &c in set {
            holders[c] += 1;
        }
    }

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; nc];

    let mut shards = Vec::with_capacity(n_clients);
    for (i, set) in class_sets.iter().enumerate() {
        let per_class = set
            .iter()
            .map(|&c| {
                if holders[c] == 0 {
                    0
                } else {
                    pools[c].len() / holders[c]
                }
            })
            .min()
            .unwrap_or(0);
        if per_class == 0 {
            return Err(Error::TooFewSamples(format!(
                "client {i} would receive an empty shard"
            )));
        }
        let mut indices = Vec::with_capacity(per_class * set.len());
        for &c in set {
            indices.extend_from_slice(&pools[c][cursors[c]..cursors[c] + per_class]);
            cursors[c] += per_class;
        }
        let data = ds.subset(&indices)?;
        shards.push(Shard {
            client_id: i,
            data,
            active_classes: set.clone(),
        });
    }
    let mut remainder = Vec::new();
    for (c, pool) in pools.iter().enumerate() {
        remainder.extend_from_slice(&pool[cursors[c]..]);
    }
    remainder.sort_unstable();
    Ok(Partition { shards, remainder })
}

/// Builds the evaluation sets for a partition: the untouched global test set
/// plus, per shard, the subset of test samples whose labels the shard is
/// allowed to score.
pub fn make_test_sets(test: &Dataset, shards: &[Shard]) -> Result<(Dataset, Vec<Dataset>)> {
    let mut locals = Vec::with_capacity(shards.len());
    for shard in shards {
        let indices: Vec<usize> = (0..test.len())
            .filter(|&i| shard.active_classes.contains(&test.labels[i]))
            .collect();
        locals.push(test.subset(&indices)?);
    }
    Ok((test.clone(), locals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_have_expected_counts_and_labels() {
        let ds = gen_gaussian_blobs(3, 5, 10, 0.4, 1).unwrap();
        assert_eq!(ds.len(), 30);
        assert_eq!(ds.class_counts(), vec![10, 10, 10]);
        assert_eq!(ds.dim(), 5);
    }

    #[test]
    fn blobs_zero_spread_collapses_to_centers() {
        let ds = gen_gaussian_blobs(2, 4, 5, 0.0, 9).unwrap();
        for c in 0..2 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| ds.inputs.row(i))
                .collect();
            for r in &rows[1..] {
                assert_eq!(*r, rows[0]);
            }
            let norm: f64 = rows[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 3.0).abs() < 1e-12, "center radius {norm}");
        }
    }

    #[test]
    fn blobs_are_deterministic_in_seed() {
        let a = gen_gaussian_blobs(3, 4, 6, 0.5, 7).unwrap();
        let b = gen_gaussian_blobs(3, 4, 6, 0.5, 7).unwrap();
        assert_eq!(a.inputs, b.inputs);
        let c = gen_gaussian_blobs(3, 4, 6, 0.5, 8).unwrap();
        assert!(a.inputs.max_abs_diff(&c.inputs) > 0.0);
    }

    #[test]
    fn iid_partition_respects_half_rule_and_disjointness() {
        let ds = gen_gaussian_blobs(4, 3, 50, 0.5, 3).unwrap();
        let part = partition_iid(&ds, 7, 11).unwrap();
        assert_eq!(part.shards.len(), 7);
        let sizes: Vec<usize> = part.shards.iter().map(|s| s.data.len()).collect();
        let min = *sizes.iter().min().unwrap();
        let max = *sizes.iter().max().unwrap();
        assert!(min * 2 >= max, "sizes {sizes:?}");
        // Every shard holds every class.
        for s in &part.shards {
            let counts = s.data.class_counts();
            assert!(counts.iter().all(|&c| c > 0), "counts {counts:?}");
            assert_eq!(s.active_classes.len(), 4);
        }
        // Disjoint cover: assigned + remainder = n.
        let assigned: usize = sizes.iter().sum();
        assert_eq!(assigned + part.remainder.len(), ds.len());
    }

    #[test]
    fn iid_partition_rejects_starved_configs() {
        let ds = gen_gaussian_blobs(4, 3, 2, 0.5, 3).unwrap(); // 8 samples
        let err = partition_iid(&ds, 9, 0).unwrap_err();
        assert!(err.to_string().contains("too-few-samples"));
        let err = partition_iid(&ds, 4, 0).unwrap_err(); // q=2, low=1 < 4 classes
        assert!(err.to_string().contains("too-few-samples"));
    }

    #[test]
    fn noniid_partition_uses_exact_class_fraction() {
        let ds = gen_gaussian_blobs(10, 4, 30, 0.5, 5).unwrap();
        let part = partition_noniid(&ds, 12, 0.2, 21).unwrap();
        for s in &part.shards {
            assert_eq!(s.active_classes.len(), 2);
            let counts = s.data.class_counts();
            let nonzero: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
            assert_eq!(nonzero.len(), 2);
            assert_eq!(nonzero[0], nonzero[1], "equal per-class counts");
            for (c, &count) in counts.iter().enumerate() {
                assert_eq!(count > 0, s.active_classes.contains(&c));
            }
        }
        // 12 clients * 2 classes >= 10 classes: full coverage.
        let covered: BTreeSet<usize> = part
            .shards
            .iter()
            .flat_map(|s| s.active_classes.iter().copied())
            .collect();
        assert_eq!(covered.len(), 10);
        let assigned: usize = part.shards.iter().map(|s| s.data.len()).sum();
        assert_eq!(assigned + part.remainder.len(), ds.len());
    }

    #[test]
    fn classes_per_shard_rounds_up() {
        assert_eq!(noniid_classes_per_shard(10, 0.2), 2);
        assert_eq!(noniid_classes_per_shard(15, 0.2), 3);
        assert_eq!(noniid_classes_per_shard(7, 0.2), 2); // ceil(1.4)
        assert_eq!(noniid_classes_per_shard(3, 1.0), 3);
        assert_eq!(noniid_classes_per_shard(50, 0.01), 1);
    }

    #[test]
    fn test_sets_filter_by_active_classes() {
        let train = gen_gaussian_blobs(4, 3, 20, 0.5, 2).unwrap();
        let test = gen_gaussian_blobs(4, 3, 10, 0.5, 3).unwrap();
        let part = partition_noniid(&train, 4, 0.5, 13).unwrap();
        let (global, locals) = make_test_sets(&test, &part.shards).unwrap();
        assert_eq!(global.len(), test.len());
        for (shard, local) in part.shards.iter().zip(locals.iter()) {
            assert!(local.labels.iter().all(|l| shard.active_classes.contains(l)));
            // Proportional: every active class keeps its full test share.
            let expected: usize = shard.active_classes.len() * 10;
            assert_eq!(local.len(), expected);
        }
    }

    #[test]
    fn csv_dump_has_fixed_header_and_rows() {
        let ds = gen_gaussian_blobs(2, 3, 2, 0.1, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x0,x1,x2,label");
        assert_eq!(lines.count(), 4);
    }
}

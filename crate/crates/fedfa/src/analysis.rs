//! Weight-space and cost diagnostics: correlation-based layer similarity,
//! scale drift between models, logit-variance growth, multiply-accumulate
//! accounting, normalization scale cancellation, and a per-round scaling
//! sanity check.

use std::io::Write;

use crate::aggregation::AggregationReport;
use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::model::{LayerKey, Model};
use crate::tensor::Tensor;
use crate::training::forward;

/// Pearson correlation of two equal-length vectors.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::ShapeError(format!(
            "correlation needs two equal vectors of at least 2 entries, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateVector(
            "constant vector has no defined correlation".into(),
        ));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

fn row_is_degenerate(row: &[f64]) -> bool {
    row.iter().all(|v| *v == row[0])
}

/// Similarity of two weight matrices: rows are treated as filters, both
/// matrices are sliced to their common `[rows, cols]`, and each row of `a`
/// (in ascending order) greedily claims the unused row of `b` with the
/// highest correlation (ties toward the lower index). Returns the mean
/// matched correlation. Constant rows carry no signal and are skipped; if
/// nothing can be matched the layer pair is degenerate.
pub fn layer_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeError(format!(
            "layer similarity expects matrices, got ranks {} and {}",
            a.rank(),
            b.rank()
        )));
    }
    let rows = a.n_rows().min(b.n_rows());
    let cols = a.n_cols().min(b.n_cols());
    if rows == 0 || cols < 2 {
        return Err(Error::ShapeError(format!(
            "common shape [{rows}, {cols}] is too small for correlation"
        )));
    }
    let a = a.slice2d(rows, cols)?;
    let b = b.slice2d(rows, cols)?;
    let mut used = vec![false; rows];
    let mut total = 0.0;
    let mut matched = 0usize;
    for i in 0..rows {
        if row_is_degenerate(a.row(i)) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in 0..rows {
            if used[j] || row_is_degenerate(b.row(j)) {
                continue;
            }
            let r = pcc(a.row(i), b.row(j))?;
            if best.is_none_or(|(_, v)| r > v) {
                best = Some((j, r));
            }
        }
        if let Some((j, r)) = best {
            used[j] = true;
            total += r;
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(Error::DegenerateLayer(
            "no row pair with usable variance".into(),
        ));
    }
    Ok(total / matched as f64)
}

/// Greedy matching is order-sensitive, so reports store the mean of both
/// directions.
pub fn layer_similarity_symmetric(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((layer_similarity(a, b)? + layer_similarity(b, a)?) / 2.0)
}

/// One row of a within-section block-similarity table.
#[derive(Debug, Clone)]
pub struct SimilarityRow {
    pub section: usize,
    pub block_i: usize,
    pub block_j: usize,
    pub epoch_tag: String,
    pub similarity: f64,
}

/// Pairwise similarity among each section's residual blocks, excluding the
/// first block of every section (its input role differs from the rest).
pub fn section_similarity_table(model: &Model, epoch_tag: &str) -> Result<Vec<SimilarityRow>> {
    let mut rows = Vec::new();
    for (s, sec) in model.arch.sections.iter().enumerate() {
        for i in 1..sec.depth {
            for j in i + 1..sec.depth {
                let wi = &model
                    .layer(LayerKey::Block(s, i))
                    .expect("validated model has its blocks")
                    .weight;
                let wj = &model
                    .layer(LayerKey::Block(s, j))
                    .expect("validated model has its blocks")
                    .weight;
                rows.push(SimilarityRow {
                    section: s,
                    block_i: i,
                    block_j: j,
                    epoch_tag: epoch_tag.to_string(),
                    similarity: layer_similarity_symmetric(wi, wj)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Per-layer magnitude of a baseline model and its mean absolute distance
/// to the corresponding slice of a larger model.
#[derive(Debug, Clone)]
pub struct ScaleRow {
    pub key: LayerKey,
    pub avg_magnitude: f64,
    pub avg_distance: f64,
}

/// Mean absolute weight (per layer, over the baseline's entries) and mean
/// absolute difference against the same-shaped slice of `other`. Biases and
/// fixed statistics are excluded.
pub fn scale_metrics(baseline: &Model, other: &Model) -> Result<Vec<ScaleRow>> {
    if !baseline.arch.fits_within(&other.arch) {
        return Err(Error::NotASubmodel(format!(
            "'{}' does not fit within '{}'",
            baseline.arch.seed_tag, other.arch.seed_tag
        )));
    }
    let mut rows = Vec::new();
    for layer in &baseline.layers {
        let key = layer.key();
        let big = other
            .layer(key)
            .ok_or_else(|| Error::NotASubmodel(format!("missing layer {key}")))?;
        let (r, c) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let sliced = big.weight.slice2d(r, c)?;
        let n = (r * c) as f64;
        let avg_magnitude = layer.weight.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        let avg_distance = layer
            .weight
            .data()
            .iter()
            .zip(sliced.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
        rows.push(ScaleRow {
            key,
            avg_magnitude,
            avg_distance,
        });
    }
    Ok(rows)
}

/// Population variance over every entry of a matrix.
pub fn population_variance(t: &Tensor) -> f64 {
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Variance of the logits of each snapshot on fixed inputs, plus the mean
/// per-step growth. With fewer than two snapshots the growth rate is zero.
pub fn logit_variance_rate(
    snapshots: &[Model],
    eval_inputs: &Tensor,
) -> Result<(Vec<f64>, f64)> {
    if snapshots.is_empty() {
        return Err(Error::BadConfig(
            "variance series needs at least one snapshot".into(),
        ));
    }
    let mut series = Vec::with_capacity(snapshots.len());
    for m in snapshots {
        let logits = forward(m, eval_inputs, None)?;
        series.push(population_variance(&logits));
    }
    let rate = if series.len() < 2 {
        0.0
    } else {
        series
            .windows(2)
            .map(|w| w[1] - w[0])
            .sum::<f64>()
            / (series.len() - 1) as f64
    };
    Ok((series, rate))
}

/// Multiply-accumulates for a list of dense layers over one epoch: each
/// `[out, in]` layer costs `out * in` per sample, times a factor of three
/// for the forward pass and the two backward products.
pub fn macs_for_dims(dims: &[(usize, usize)], shard_size: usize) -> f64 {
    dims.iter()
        .map(|&(o, i)| (o * i * shard_size * 3) as f64)
        .sum()
}

/// One epoch of local training for this architecture and shard size.
pub fn macs_per_epoch(arch: &ArchSpec, shard_size: usize) -> f64 {
    macs_for_dims(&arch.linear_layer_dims(), shard_size)
}

/// `(MACS, MACE, TMAC)`: per-epoch cost of one client, per-epoch cost of
/// all participants, and the whole experiment's cost.
pub fn mac_estimate(
    arch: &ArchSpec,
    shard_size: usize,
    epochs: usize,
    rounds: usize,
    participants: usize,
) -> (f64, f64, f64) {
    let macs = macs_per_epoch(arch, shard_size);
    let mace = participants as f64 * macs;
    let tmac = (rounds * epochs) as f64 * mace;
    (macs, mace, tmac)
}

/// Per-epoch cost of one heterogeneous round: participant count times the
/// mean per-client cost, which is simply the sum of the costs.
pub fn mace_for_round(clients: &[(&ArchSpec, usize)]) -> f64 {
    clients
        .iter()
        .map(|(a, n)| macs_per_epoch(a, *n))
        .sum()
}

/// Largest deviation between normalizing a vector and normalizing a scaled
/// copy, where normalization is `(v - mean) / sqrt(var + eps)`. With
/// `eps = 0` the scale factor cancels algebraically.
pub fn bn_scale_check(y: &Tensor, alpha: f64, eps: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyTensor("normalization check input".into()));
    }
    if !alpha.is_finite() || !eps.is_finite() || eps < 0.0 {
        return Err(Error::BadConfig(format!(
            "scale check needs finite alpha and non-negative eps, got {alpha} and {eps}"
        )));
    }
    let bn = |v: &[f64]| -> Result<Vec<f64>> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let denom = (var + eps).sqrt();
        if denom == 0.0 {
            return Err(Error::DegenerateVector(
                "zero variance with zero eps cannot be normalized".into(),
            ));
        }
        Ok(v.iter().map(|x| (x - mean) / denom).collect())
    };
    let base = bn(y.data())?;
    let scaled_input: Vec<f64> = y.data().iter().map(|v| alpha * v).collect();
    let scaled = bn(&scaled_input)?;
    Ok(base
        .iter()
        .zip(scaled.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Guard band for per-round scale factors; factors outside it indicate the
/// aggregation is amplifying or crushing some client's contribution.
pub const ALPHA_GUARD_BAND: (f64, f64) = (0.05, 20.0);

#[derive(Debug, Clone)]
pub struct ConvergenceDiagnostic {
    /// Largest scale factor of each round, in round order.
    pub max_alpha_per_round: Vec<f64>,
    /// True when every round stayed inside [`ALPHA_GUARD_BAND`].
    pub within_guard_band: bool,
}

pub fn convergence_diagnostic(reports: &[AggregationReport]) -> ConvergenceDiagnostic {
    let max_alpha_per_round: Vec<f64> = reports.iter().map(|r| r.alpha_max).collect();
    let (lo, hi) = ALPHA_GUARD_BAND;
    let within_guard_band = max_alpha_per_round
        .iter()
        .all(|a| *a >= lo && *a <= hi);
    ConvergenceDiagnostic {
        max_alpha_per_round,
        within_guard_band,
    }
}

pub fn write_similarity_csv<W: Write>(mut w: W, rows: &[SimilarityRow]) -> Result<()> {
    writeln!(w, "section,block_i,block_j,epoch_tag,similarity")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.section, r.block_i, r.block_j, r.epoch_tag, r.similarity
        )?;
    }
    Ok(())
}

pub fn write_scale_csv<W: Write>(mut w: W, rows: &[ScaleRow]) -> Result<()> {
    writeln!(w, "layer,avg_magnitude,avg_distance")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.key, r.avg_magnitude, r.avg_distance)?;
    }
    Ok(())
}

pub fn write_variance_csv<W: Write>(mut w: W, series: &[f64], rate: f64) -> Result<()> {
    writeln!(w, "snapshot,variance")?;
    for (i, v) in series.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    writeln!(w, "rate,{rate}")?;
    Ok(())
}

pub fn write_mac_csv<W: Write>(mut w: W, macs: f64, mace: f64, tmac: f64) -> Result<()> {
    writeln!(w, "macs,mace,tmac")?;
    writeln!(w, "{macs},{mace},{tmac}")?;
    Ok(())
}

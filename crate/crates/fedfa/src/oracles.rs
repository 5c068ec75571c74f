//! Independent reference implementations used to cross-check the main code
//! paths. Each function here is deliberately written as the most obvious
//! brute-force computation (sort-and-threshold, index formulas, central
//! differences, exhaustive enumeration) and shares no logic with the
//! implementation it validates. The `oracle` CLI subcommand prints their
//! outputs for by-hand inspection; the test suite asserts against them.

use crate::model::Model;
use crate::tensor::Tensor;
use crate::training::{batch_loss, Batch, Gradients};

/// Sort-and-threshold reference for the sub-percentile filter: sorts the
/// absolute values, reads the `ceil(p * n)`-th smallest as the threshold and
/// collects the strictly smaller entries in input order, with the same
/// small-tensor and empty-result fallbacks as the real filter.
pub fn percentile_filter_oracle(values: &[f64], p: f64) -> Vec<f64> {
    let n = values.len();
    if n < 20 {
        return values.to_vec();
    }
    let mut sorted: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut rank = ((p * n as f64) - 1e-9).ceil() as usize;
    rank = rank.clamp(1, n);
    let threshold = sorted[rank - 1];
    let kept: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| v.abs() < threshold)
        .collect();
    if kept.is_empty() {
        values.to_vec()
    } else {
        kept
    }
}

/// Index-formula reference for leading-submatrix slicing: reads
/// `t[i * cols + j]` for every `i < c_out`, `j < c_in`.
pub fn slice2d_oracle(t: &Tensor, c_out: usize, c_in: usize) -> Tensor {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(c_out * c_in);
    for i in 0..c_out {
        for j in 0..c_in {
            data.push(t.data()[i * cols + j]);
        }
    }
    Tensor::new(vec![c_out, c_in], data).expect("oracle slice is well-formed")
}

/// Brute-force count/sum reference for the weighted accumulation used by the
/// aggregators: for every position of the `[rows, cols]` global layer, sums
/// `n * alpha * w` and `n` over the contributors that reach that position,
/// then divides (falling back to `prev` where no one contributed).
pub fn accumulation_oracle(
    rows: usize,
    cols: usize,
    prev: &Tensor,
    contributions: &[(Tensor, f64, f64)],
) -> Tensor {
    let mut out = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows {
        for j in 0..cols {
            let mut num = 0.0;
            let mut den = 0.0;
            for (w, n, alpha) in contributions {
                if i < w.shape()[0] && j < w.shape()[1] {
                    num += n * alpha * w.get2(i, j);
                    den += n;
                }
            }
            let v = if den > 0.0 { num / den } else { prev.get2(i, j) };
            out.set2(i, j, v);
        }
    }
    out
}

/// Reference row selection for filter grafting: indices of the `delta`
/// largest rows by Euclidean norm, ties resolved toward the lower index,
/// cycling with repetition when `delta` exceeds the row count.
pub fn top_rows_oracle(weight: &Tensor, delta: usize) -> Vec<usize> {
    let rows = weight.shape()[0];
    let mut order: Vec<usize> = (0..rows).collect();
    let norm = |i: usize| -> f64 {
        weight.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    order.sort_by(|&a, &b| norm(b).partial_cmp(&norm(a)).unwrap().then(a.cmp(&b)));
    (0..delta).map(|k| order[k % rows]).collect()
}

/// Exhaustive assignment search for layer similarity: enumerates every
/// injective map from rows of `a` to rows of `b` and returns the best mean
/// Pearson correlation. Only usable for small layers (factorial cost).
pub fn best_assignment_similarity(a: &Tensor, b: &Tensor) -> f64 {
    let rows = a.shape()[0];
    assert!(rows <= 7, "exhaustive assignment oracle is factorial");
    assert_eq!(rows, b.shape()[0]);
    let mut cols: Vec<usize> = (0..rows).collect();
    let mut best = f64::NEG_INFINITY;
    permute(&mut cols, 0, &mut |perm| {
        let mut total = 0.0;
        for (i, &j) in perm.iter().enumerate() {
            total += pearson_reference(a.row(i), b.row(j));
        }
        let mean = total / rows as f64;
        if mean > best {
            best = mean;
        }
    });
    best
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Textbook Pearson correlation used by the matching oracle and the
/// correlation unit tests.
pub fn pearson_reference(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
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
    cov / (va.sqrt() * vb.sqrt())
}

/// Closed-form multiply-accumulate count for a stack of dense layers: each
/// `[out, in]` layer costs `out * in` per sample, times the shard size,
/// times a factor of three for the forward and backward passes of one
/// training epoch.
pub fn macs_oracle(layer_dims: &[(usize, usize)], shard_size: usize) -> f64 {
    let mut total = 0.0;
    for &(out, inp) in layer_dims {
        total += (out * inp * shard_size * 3) as f64;
    }
    total
}

/// Parameter count by actually instantiating the model and measuring its
/// tensors, cross-checking the closed-form architecture count.
pub fn model_param_count_oracle(arch: &crate::arch::ArchSpec) -> usize {
    let m = crate::model::build_model(arch, 0).expect("oracle build");
    m.layers
        .iter()
        .map(|l| l.weight.len() + l.bias.len())
        .sum()
}

/// Central-difference gradients, touching every parameter one at a time and
/// re-running the forward-only loss. Quadratic cost; meant for small models
/// in tests and the `oracle` subcommand.
pub fn finite_difference_gradients(model: &Model, batch: &Batch, eps: f64) -> Gradients {
    let mut grads = Gradients::zeros_like(model);
    let n_layers = model.layers.len();
    for idx in 0..n_layers {
        for field in 0..2usize {
            let len = if field == 0 {
                model.layers[idx].weight.len()
            } else {
                model.layers[idx].bias.len()
            };
            for pos in 0..len {
                let mut plus = model.clone();
                let mut minus = model.clone();
                {
                    let t = if field == 0 {
                        &mut plus.layers[idx].weight
                    } else {
                        &mut plus.layers[idx].bias
                    };
                    t.data_mut()[pos] += eps;
                }
                {
                    let t = if field == 0 {
                        &mut minus.layers[idx].weight
                    } else {
                        &mut minus.layers[idx].bias
                    };
                    t.data_mut()[pos] -= eps;
                }
                let lp = batch_loss(&plus, batch).expect("oracle forward");
                let lm = batch_loss(&minus, batch).expect("oracle forward");
                let g = (lp - lm) / (2.0 * eps);
                let t = if field == 0 {
                    &mut grads.layers[idx].weight
                } else {
                    &mut grads.layers[idx].bias
                };
                t.data_mut()[pos] = g;
            }
        }
    }
    grads
}

/// Worst relative disagreement between two gradient sets, guarding the
/// denominator so near-zero pairs compare absolutely.
pub fn max_relative_gradient_error(a: &Gradients, b: &Gradients) -> f64 {
    let mut worst = 0.0f64;
    for (ga, gb) in a.layers.iter().zip(b.layers.iter()) {
        let pairs = ga
            .weight
            .data()
            .iter()
            .zip(gb.weight.data())
            .chain(ga.bias.data().iter().zip(gb.bias.data()));
        for (x, y) in pairs {
            let rel = (x - y).abs() / (x.abs() + y.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Closed-form deviation of normalizing a scaled copy: for
/// `bn(v) = (v - mean) / sqrt(var + eps)` the deviation of `bn(alpha * y)`
/// from `bn(y)` at element `i` is `|d_i| * |alpha / sqrt(alpha^2 var + eps)
/// - 1 / sqrt(var + eps)|` with `d_i = y_i - mean`.
pub fn bn_deviation_oracle(y: &[f64], alpha: f64, eps: f64) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let factor = (alpha / (alpha * alpha * var + eps).sqrt()
        - 1.0 / (var + eps).sqrt())
    .abs();
    y.iter()
        .map(|v| (v - mean).abs() * factor)
        .fold(0.0, f64::max)
}

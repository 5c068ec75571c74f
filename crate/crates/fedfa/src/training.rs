//! Local training: forward pass, cross-entropy with class masking, exact
//! analytic gradients and deterministic minibatch SGD.
//!
//! Entry layers apply `relu(W x + b)`, residual blocks `relu(W x + b) + x`,
//! static normalization layers an elementwise affine map around their fixed
//! statistics, and the output layer is purely linear. Logits of classes a
//! client does not hold are pinned to a large negative constant before the
//! loss, so absent classes receive exactly zero gradient.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::data::{Dataset, Shard};
use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::seed::rng_from;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Logit value assigned to classes outside a batch's active set.
pub const MASK_LOGIT: f64 = -1e9;

/// A set of rows ready for one loss/gradient evaluation.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[n, dim]` inputs.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Classes this batch is allowed to score; labels must be members.
    pub active_classes: BTreeSet<usize>,
}

impl Batch {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        active_classes: BTreeSet<usize>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch("batch has no rows".into()));
        }
        if inputs.rank() != 2 || inputs.n_rows() != labels.len() {
            return Err(Error::ShapeError(format!(
                "batch inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if active_classes.is_empty() {
            return Err(Error::ShapeError("batch active class set is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|l| !active_classes.contains(l)) {
            return Err(Error::ShapeError(format!(
                "label {bad} is not in the batch's active class set"
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            active_classes,
        })
    }

    /// The whole shard as a single batch.
    pub fn from_shard(shard: &Shard) -> Result<Batch> {
        Batch::new(
            shard.data.inputs.clone(),
            shard.data.labels.clone(),
            shard.active_classes.clone(),
        )
    }
}

/// Per-layer gradient (or gradient-shaped) tensors: one `[out, in]` weight
/// companion and one `[out]` bias companion per layer, in network order.
/// Normalization layers report their gain and shift here; their fixed
/// statistics have no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<GradTensors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradTensors {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Gradients {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| GradTensors {
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut worst = 0.0f64;
        for g in &self.layers {
            for v in g.weight.data().iter().chain(g.bias.data()) {
                worst = worst.max(v.abs());
            }
        }
        worst
    }

    /// Euclidean norm over every entry.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in &self.layers {
            for v in g.weight.data().iter().chain(g.bias.data()) {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn matches_model(&self, model: &Model) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(model.layers.iter()).all(|(g, l)| {
                g.weight.shape() == l.weight.shape() && g.bias.shape() == l.bias.shape()
            })
    }
}

struct ForwardCache {
    /// Input seen by each layer.
    layer_inputs: Vec<Tensor>,
    /// Pre-activation of relu layers, `None` elsewhere.
    preacts: Vec<Option<Tensor>>,
    /// Masked logits.
    logits: Tensor,
}

// Hot-path constructions skip per-element finiteness validation; a single
// check at the end of the forward pass turns any overflow into a clean
// non-finite error instead.
fn relu(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.shape().to_vec());
    for (o, v) in out.data_mut().iter_mut().zip(t.data().iter()) {
        *o = v.max(0.0);
    }
    out
}

/// Zeroes `upstream` wherever the pre-activation was not strictly positive.
fn relu_backward(upstream: &Tensor, pre: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(upstream.shape().to_vec());
    for ((o, u), z) in out
        .data_mut()
        .iter_mut()
        .zip(upstream.data().iter())
        .zip(pre.data().iter())
    {
        if *z > 0.0 {
            *o = *u;
        }
    }
    out
}

fn add_bias_rows(t: &mut Tensor, bias: &Tensor) {
    let (n, k) = (t.n_rows(), t.n_cols());
    debug_assert_eq!(bias.len(), k);
    let b = bias.data().to_vec();
    let data = t.data_mut();
    for r in 0..n {
        for c in 0..k {
            data[r * k + c] += b[c];
        }
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let (n, k) = (t.n_rows(), t.n_cols());
    let mut out = Tensor::zeros(vec![k]);
    let sums = out.data_mut();
    for r in 0..n {
        for c in 0..k {
            sums[c] += t.data()[r * k + c];
        }
    }
    out
}

fn forward_cached(
    model: &Model,
    inputs: &Tensor,
    active: Option<&BTreeSet<usize>>,
) -> Result<ForwardCache> {
    if inputs.rank() != 2 || inputs.n_cols() != model.arch.input_dim {
        return Err(Error::ShapeError(format!(
            "inputs {:?} do not match model input dim {}",
            inputs.shape(),
            model.arch.input_dim
        )));
    }
    let mut layer_inputs = Vec::with_capacity(model.layers.len());
    let mut preacts = Vec::with_capacity(model.layers.len());
    let mut x = inputs.clone();
    for layer in &model.layers {
        layer_inputs.push(x.clone());
        match layer.kind {
            LayerKind::EntryLinear => {
                let mut z = matmul_nt(&x, &layer.weight);
                add_bias_rows(&mut z, &layer.bias);
                let a = relu(&z);
                preacts.push(Some(z));
                x = a;
            }
            LayerKind::BlockLinear => {
                let mut z = matmul_nt(&x, &layer.weight);
                add_bias_rows(&mut z, &layer.bias);
                let mut a = relu(&z);
                a.add_scaled(&x, 1.0);
                preacts.push(Some(z));
                x = a;
            }
            LayerKind::StaticNorm => {
                let mean = layer.norm_mean.as_ref().expect("norm layer has mean");
                let std = layer.norm_std.as_ref().expect("norm layer has std");
                let (n, w) = (x.n_rows(), x.n_cols());
                let mut z = Tensor::zeros(vec![n, w]);
                let data = z.data_mut();
                for r in 0..n {
                    let row = x.row(r);
                    for f in 0..w {
                        let gain = layer.weight.get2(f, 0);
                        data[r * w + f] = gain * (row[f] - mean.data()[f]) / std.data()[f]
                            + layer.bias.data()[f];
                    }
                }
                preacts.push(None);
                x = z;
            }
            LayerKind::OutputLinear => {
                let mut z = matmul_nt(&x, &layer.weight);
                add_bias_rows(&mut z, &layer.bias);
                preacts.push(None);
                x = z;
            }
        }
    }
    x.validate_finite("forward pass")?;
    if let Some(active) = active {
        let (n, k) = (x.n_rows(), x.n_cols());
        let data = x.data_mut();
        for c in 0..k {
            if !active.contains(&c) {
                for r in 0..n {
                    data[r * k + c] = MASK_LOGIT;
                }
            }
        }
    }
    Ok(ForwardCache {
        layer_inputs,
        preacts,
        logits: x,
    })
}

/// Runs the network on a `[n, input_dim]` matrix and returns `[n,
/// output_dim]` logits. When `active` is given, logits of classes outside
/// the set are pinned to [`MASK_LOGIT`].
pub fn forward(
    model: &Model,
    inputs: &Tensor,
    active: Option<&BTreeSet<usize>>,
) -> Result<Tensor> {
    Ok(forward_cached(model, inputs, active)?.logits)
}

fn check_labels(model: &Model, batch: &Batch) -> Result<()> {
    let k = model.arch.output_dim;
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= k) {
        return Err(Error::ShapeError(format!(
            "label {bad} out of range for {k} outputs"
        )));
    }
    if batch.inputs.n_cols() != model.arch.input_dim {
        return Err(Error::ShapeError(format!(
            "batch dim {} does not match model input dim {}",
            batch.inputs.n_cols(),
            model.arch.input_dim
        )));
    }
    Ok(())
}

/// Mean cross-entropy of masked logits against labels, with the gradient of
/// the loss with respect to the logits.
fn ce_loss_and_dlogits(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (n, k) = (logits.n_rows(), logits.n_cols());
    let mut dlogits = Tensor::zeros(vec![n, k]);
    let mut loss_sum = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let y = labels[r];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sumexp: f64 = row.iter().map(|l| (l - m).exp()).sum();
        let lse = m + sumexp.ln();
        loss_sum += lse - row[y];
        for c in 0..k {
            let p = (row[c] - m).exp() / sumexp;
            let indicator = if c == y { 1.0 } else { 0.0 };
            dlogits.set2(r, c, (p - indicator) / n as f64);
        }
    }
    (loss_sum / n as f64, dlogits)
}

/// Forward-only loss of a batch (used by the finite-difference oracle and
/// by round metrics).
pub fn batch_loss(model: &Model, batch: &Batch) -> Result<f64> {
    check_labels(model, batch)?;
    let logits = forward(model, &batch.inputs, Some(&batch.active_classes))?;
    let (loss, _) = ce_loss_and_dlogits(&logits, &batch.labels);
    Ok(loss)
}

/// Mean cross-entropy and exact analytic gradients for every layer.
pub fn loss_and_grad(model: &Model, batch: &Batch) -> Result<(f64, Gradients)> {
    check_labels(model, batch)?;
    let cache = forward_cached(model, &batch.inputs, Some(&batch.active_classes))?;
    let (loss, dlogits) = ce_loss_and_dlogits(&cache.logits, &batch.labels);

    let mut grads: Vec<Option<GradTensors>> = vec![None; model.layers.len()];
    let mut upstream = dlogits;
    for (idx, layer) in model.layers.iter().enumerate().rev() {
        let x = &cache.layer_inputs[idx];
        match layer.kind {
            LayerKind::OutputLinear => {
                let gw = matmul_tn(&upstream, x);
                let gb = column_sums(&upstream);
                let next = matmul_nn(&upstream, &layer.weight);
                grads[idx] = Some(GradTensors { weight: gw, bias: gb });
                upstream = next;
            }
            LayerKind::EntryLinear => {
                let pre = cache.preacts[idx].as_ref().expect("entry has preact");
                let r = relu_backward(&upstream, pre);
                let gw = matmul_tn(&r, x);
                let gb = column_sums(&r);
                let next = matmul_nn(&r, &layer.weight);
                grads[idx] = Some(GradTensors { weight: gw, bias: gb });
                upstream = next;
            }
            LayerKind::BlockLinear => {
                let pre = cache.preacts[idx].as_ref().expect("block has preact");
                let r = relu_backward(&upstream, pre);
                let gw = matmul_tn(&r, x);
                let gb = column_sums(&r);
                let mut next = matmul_nn(&r, &layer.weight);
                next.add_scaled(&upstream, 1.0); // skip connection
                grads[idx] = Some(GradTensors { weight: gw, bias: gb });
                upstream = next;
            }
            LayerKind::StaticNorm => {
                let mean = layer.norm_mean.as_ref().expect("norm layer has mean");
                let std = layer.norm_std.as_ref().expect("norm layer has std");
                let (n, w) = (x.n_rows(), x.n_cols());
                let mut dgain = vec![0.0; w];
                let mut dshift = vec![0.0; w];
                let mut next = Tensor::zeros(vec![n, w]);
                for r in 0..n {
                    let xr = x.row(r);
                    for f in 0..w {
                        let u = upstream.get2(r, f);
                        let standardized = (xr[f] - mean.data()[f]) / std.data()[f];
                        dgain[f] += u * standardized;
                        dshift[f] += u;
                        next.set2(r, f, u * layer.weight.get2(f, 0) / std.data()[f]);
                    }
                }
                grads[idx] = Some(GradTensors {
                    weight: Tensor::new(vec![w, 1], dgain)?,
                    bias: Tensor::vector(dshift)?,
                });
                upstream = next;
            }
        }
    }
    let gradients = Gradients {
        layers: grads.into_iter().map(|g| g.expect("all layers visited")).collect(),
    };
    Ok((loss, gradients))
}

fn apply_sgd_step(model: &mut Model, grads: &Gradients, lr: f64) {
    for (layer, g) in model.layers.iter_mut().zip(grads.layers.iter()) {
        layer.weight.add_scaled(&g.weight, -lr);
        layer.bias.add_scaled(&g.bias, -lr);
    }
}

/// Runs `epochs` of minibatch SGD over the shard and returns the updated
/// model (the input is untouched). Each epoch reshuffles the shard with a
/// Fisher-Yates pass keyed by `(seed, epoch)`, so equal inputs give
/// bit-identical outputs.
pub fn local_update(
    model: &Model,
    shard: &Shard,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Model> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::BadLr(lr));
    }
    if batch_size == 0 {
        return Err(Error::BadConfig("batch_size must be positive".into()));
    }
    if shard.data.is_empty() {
        return Err(Error::EmptyBatch(format!(
            "client {} has an empty shard",
            shard.client_id
        )));
    }
    let mut trained = model.clone();
    let n = shard.data.len();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from(&[seed, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let data = shard.data.subset(chunk)?;
            let batch = Batch::new(data.inputs, data.labels, shard.active_classes.clone())?;
            let (_, grads) = loss_and_grad(&trained, &batch)?;
            apply_sgd_step(&mut trained, &grads, lr);
        }
    }
    trained
        .validate()
        .map_err(|e| Error::NonFinite(format!("training diverged: {e}")))?;
    Ok(trained)
}

/// Mean cross-entropy of a model over a whole shard.
pub fn shard_loss(model: &Model, shard: &Shard) -> Result<f64> {
    batch_loss(model, &Batch::from_shard(shard)?)
}

/// Index of the largest value, ties resolved toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy over a dataset, with optional class masking.
pub fn accuracy(
    model: &Model,
    ds: &Dataset,
    active: Option<&BTreeSet<usize>>,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch("accuracy over an empty dataset".into()));
    }
    let logits = forward(model, &ds.inputs, active)?;
    let mut correct = 0usize;
    for (r, &label) in ds.labels.iter().enumerate() {
        if argmax(logits.row(r)) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::data::gen_gaussian_blobs;
    use crate::model::{build_model, LayerKey};
    use crate::oracles;

    fn small_arch() -> ArchSpec {
        ArchSpec::new(3, 4, vec![(2, 5), (1, 3)], "train-test").unwrap()
    }

    fn all_classes(k: usize) -> BTreeSet<usize> {
        (0..k).collect()
    }

    fn toy_shard(n_classes: usize, per_class: usize, seed: u64, dim: usize) -> Shard {
        let data = gen_gaussian_blobs(n_classes, dim, per_class, 0.4, seed).unwrap();
        Shard {
            client_id: 0,
            data,
            active_classes: all_classes(n_classes),
        }
    }

    /// Freshly built models have all-zero biases, so a sample that silences
    /// an entire entry layer puts the next block's pre-activation exactly on
    /// the relu kink, where central differences measure the average of the
    /// two one-sided slopes. Nudging every bias off zero keeps the
    /// finite-difference checks away from that measure-zero configuration.
    fn jitter_biases(model: &mut Model) {
        for (idx, layer) in model.layers.iter_mut().enumerate() {
            for (j, b) in layer.bias.data_mut().iter_mut().enumerate() {
                *b += 0.011 * (j + 1) as f64 + 0.003 * (idx + 1) as f64;
            }
        }
    }

    fn zeroed(model: &Model) -> Model {
        let mut m = model.clone();
        for l in &mut m.layers {
            if l.kind != LayerKind::StaticNorm {
                l.weight.scale_in_place(0.0);
            } else {
                l.weight.scale_in_place(0.0); // zero gain silences the section
            }
            l.bias.scale_in_place(0.0);
        }
        m
    }

    #[test]
    fn zero_model_outputs_zero_logits() {
        let m = zeroed(&build_model(&small_arch(), 1).unwrap());
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![0.0, 0.0, 0.0]]).unwrap();
        let logits = forward(&m, &x, None).unwrap();
        assert!(logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zeroed_block_is_a_pure_skip() {
        let a = ArchSpec::new(3, 3, vec![(1, 3)], "skip").unwrap();
        let mut m = build_model(&a, 5).unwrap();
        // Entry = identity, block = zeros, output = identity: the network
        // computes relu(x) end to end, with the block passing its input
        // through untouched.
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        m.layer_mut(LayerKey::Entry(0)).unwrap().weight = eye.clone();
        let b = m.layer_mut(LayerKey::Block(0, 0)).unwrap();
        b.weight.scale_in_place(0.0);
        b.bias.scale_in_place(0.0);
        m.layer_mut(LayerKey::Output).unwrap().weight = eye;
        let x = Tensor::from_rows(&[vec![0.5, 0.0, 2.0], vec![1.0, 3.0, 0.25]]).unwrap();
        let logits = forward(&m, &x, None).unwrap();
        assert_eq!(logits, x); // relu is a no-op on non-negative inputs
    }

    #[test]
    fn masking_with_all_classes_is_a_noop() {
        let m = build_model(&small_arch(), 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let plain = forward(&m, &x, None).unwrap();
        let masked = forward(&m, &x, Some(&all_classes(4))).unwrap();
        assert_eq!(plain, masked);
    }

    #[test]
    fn masking_pins_absent_classes() {
        let m = build_model(&small_arch(), 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let active: BTreeSet<usize> = [1, 3].into_iter().collect();
        let logits = forward(&m, &x, Some(&active)).unwrap();
        assert_eq!(logits.get2(0, 0), MASK_LOGIT);
        assert_eq!(logits.get2(0, 2), MASK_LOGIT);
        assert_ne!(logits.get2(0, 1), MASK_LOGIT);
    }

    #[test]
    fn uniform_logits_cost_ln_of_active_count() {
        // A zeroed model scores every class equally, so the loss over k
        // active classes is exactly ln(k); masked classes do not take part.
        let m = zeroed(&build_model(&small_arch(), 3).unwrap());
        let x = Tensor::from_rows(&[vec![1.0, -1.0, 0.5]]).unwrap();
        let active: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        let batch = Batch::new(x, vec![1], active).unwrap();
        let loss = batch_loss(&m, &batch).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut m = build_model(&small_arch(), 11).unwrap();
        jitter_biases(&mut m);
        let shard = toy_shard(4, 2, 21, 3);
        let batch = Batch::from_shard(&shard).unwrap();
        let (_, analytic) = loss_and_grad(&m, &batch).unwrap();
        let numeric = oracles::finite_difference_gradients(&m, &batch, 1e-5);
        let worst = oracles::max_relative_gradient_error(&analytic, &numeric);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn finite_difference_check_covers_masked_batches() {
        let mut m = build_model(&small_arch(), 13).unwrap();
        jitter_biases(&mut m);
        let ds = gen_gaussian_blobs(4, 3, 3, 0.5, 8).unwrap();
        let keep: Vec<usize> = (0..ds.len()).filter(|i| ds.labels[*i] < 2).collect();
        let sub = ds.subset(&keep).unwrap();
        let active: BTreeSet<usize> = [0, 1].into_iter().collect();
        let batch = Batch::new(sub.inputs, sub.labels, active).unwrap();
        let (_, analytic) = loss_and_grad(&m, &batch).unwrap();
        let numeric = oracles::finite_difference_gradients(&m, &batch, 1e-5);
        let worst = oracles::max_relative_gradient_error(&analytic, &numeric);
        assert!(worst < 1e-4, "max relative error {worst}");
        // Output rows of masked classes must receive exactly zero gradient.
        let out_idx = m.layers.len() - 1;
        let gw = &analytic.layers[out_idx].weight;
        for c in 2..4 {
            assert!(gw.row(c).iter().all(|v| *v == 0.0));
            assert_eq!(analytic.layers[out_idx].bias.data()[c], 0.0);
        }
    }

    #[test]
    fn duplicated_rows_leave_the_gradient_unchanged() {
        let m = build_model(&small_arch(), 17).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, 0.4, -0.1], vec![-0.5, 0.3, 0.9]]).unwrap();
        let labels = vec![0, 2];
        let batch = Batch::new(x.clone(), labels.clone(), all_classes(4)).unwrap();
        let doubled_x = Tensor::from_rows(&[
            x.row(0).to_vec(),
            x.row(1).to_vec(),
            x.row(0).to_vec(),
            x.row(1).to_vec(),
        ])
        .unwrap();
        let doubled =
            Batch::new(doubled_x, vec![0, 2, 0, 2], all_classes(4)).unwrap();
        let (l1, g1) = loss_and_grad(&m, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&m, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.layers.iter().zip(g2.layers.iter()) {
            assert!(a.weight.max_abs_diff(&b.weight) < 1e-12);
            assert!(a.bias.max_abs_diff(&b.bias) < 1e-12);
        }
    }

    #[test]
    fn zero_epochs_returns_the_model_unchanged() {
        let m = build_model(&small_arch(), 19).unwrap();
        let shard = toy_shard(4, 3, 23, 3);
        let out = local_update(&m, &shard, 0, 0.1, 4, 99).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn single_full_batch_step_is_one_sgd_update() {
        let m = build_model(&small_arch(), 29).unwrap();
        let shard = toy_shard(4, 2, 31, 3);
        let n = shard.data.len();
        let stepped = local_update(&m, &shard, 1, 0.05, n, 7).unwrap();
        // One epoch with batch_size = n is a single step on the full shard;
        // row order inside the batch does not change the mean gradient.
        let (_, grads) = loss_and_grad(&m, &Batch::from_shard(&shard).unwrap()).unwrap();
        let mut expected = m.clone();
        apply_sgd_step(&mut expected, &grads, 0.05);
        assert!(stepped.max_abs_param_diff(&expected) < 1e-12);
    }

    #[test]
    fn local_update_is_deterministic() {
        let m = build_model(&small_arch(), 37).unwrap();
        let shard = toy_shard(4, 5, 41, 3);
        let a = local_update(&m, &shard, 3, 0.05, 4, 123).unwrap();
        let b = local_update(&m, &shard, 3, 0.05, 4, 123).unwrap();
        assert_eq!(a, b);
        let c = local_update(&m, &shard, 3, 0.05, 4, 124).unwrap();
        assert!(a.max_abs_param_diff(&c) > 0.0);
    }

    #[test]
    fn bad_learning_rates_and_empty_shards_are_rejected() {
        let m = build_model(&small_arch(), 43).unwrap();
        let shard = toy_shard(4, 2, 47, 3);
        for lr in [0.0, -0.5, f64::NAN] {
            let err = local_update(&m, &shard, 1, lr, 4, 1).unwrap_err();
            assert!(err.to_string().contains("bad-lr"));
        }
        let mut empty = shard.clone();
        empty.data = empty.data.subset(&[]).unwrap();
        let err = local_update(&m, &empty, 1, 0.1, 4, 1).unwrap_err();
        assert!(err.to_string().contains("empty-batch"));
        let err = local_update(&m, &shard, 1, 0.1, 0, 1).unwrap_err();
        assert!(err.to_string().contains("bad-config"));
    }

    #[test]
    fn loss_trends_down_on_a_separable_toy() {
        // Median over five seeds: epoch-end loss is non-increasing on a
        // well-separated two-class task with a small learning rate.
        let a = ArchSpec::new(4, 2, vec![(1, 6)], "toy").unwrap();
        let mut monotone = 0;
        for seed in 0..5u64 {
            let ds = gen_gaussian_blobs(2, 4, 12, 0.3, 100 + seed).unwrap();
            let shard = Shard {
                client_id: 0,
                data: ds,
                active_classes: all_classes(2),
            };
            let mut model = build_model(&a, seed).unwrap();
            let mut losses = vec![shard_loss(&model, &shard).unwrap()];
            for epoch in 0..10 {
                model = local_update(&model, &shard, 1, 0.01, 6, seed * 1000 + epoch).unwrap();
                losses.push(shard_loss(&model, &shard).unwrap());
            }
            if losses.windows(2).all(|w| w[1] <= w[0] + 1e-12) {
                monotone += 1;
            }
        }
        assert!(monotone >= 3, "monotone in {monotone}/5 seeds");
    }

    #[test]
    fn accuracy_counts_argmax_hits_with_low_index_ties() {
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        let a = ArchSpec::new(2, 2, vec![(1, 2)], "acc").unwrap();
        let m = zeroed(&build_model(&a, 0).unwrap());
        // All logits zero: every prediction is class 0.
        let ds = Dataset::new(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0, 1],
            2,
        )
        .unwrap();
        assert_eq!(accuracy(&m, &ds, None).unwrap(), 0.5);
    }
}

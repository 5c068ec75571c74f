//! Malicious-client behaviors: additive backdoor injection, label
//! shuffling, and the attacker's architecture choice.
//!
//! A backdoored update is the benign update plus `lambda` times a backdoor
//! direction. Because the previous global model appears on both sides of
//! that sum, the result is computed directly from the benign model, which
//! keeps `lambda = 0` bit-exact.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::Shard;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::{rng_from, stream};
use crate::training::Gradients;

/// What a malicious client does to its contribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Permute the shard's labels before local training.
    LabelShuffle,
    /// Add a scaled backdoor direction to the trained update.
    AdditiveBackdoor,
    /// Both of the above.
    Both,
}

/// Attack settings for an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Fraction of the client population acting maliciously, in [0, 1].
    pub fraction_malicious: f64,
    /// Backdoor intensity; 0 leaves updates untouched.
    pub lambda: f64,
    pub mode: AttackMode,
    pub seed: u64,
    /// Class whose output bias the default backdoor direction targets.
    #[serde(default)]
    pub target_class: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            fraction_malicious: 0.0,
            lambda: 0.0,
            mode: AttackMode::AdditiveBackdoor,
            seed: 0,
            target_class: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction_malicious) {
            return Err(Error::BadConfig(format!(
                "fraction_malicious must lie in [0, 1], got {}",
                self.fraction_malicious
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::BadConfig(format!(
                "lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn shuffles_labels(&self) -> bool {
        matches!(self.mode, AttackMode::LabelShuffle | AttackMode::Both)
    }

    pub fn adds_backdoor(&self) -> bool {
        matches!(self.mode, AttackMode::AdditiveBackdoor | AttackMode::Both)
    }
}

fn congruent(a: &Model, b: &Model) -> bool {
    a.layers.len() == b.layers.len()
        && a.layers.iter().zip(b.layers.iter()).all(|(x, y)| {
            x.kind == y.kind
                && x.weight.shape() == y.weight.shape()
                && x.bias.shape() == y.bias.shape()
        })
}

/// The malicious update: benign plus `lambda` times the backdoor direction.
/// `prev_global` is accepted for shape checking; algebraically it cancels
/// out of the update sum, so it never enters the arithmetic and `lambda = 0`
/// returns the benign model bit-exactly.
pub fn backdoor_update(
    benign: &Model,
    prev_global: &Model,
    delta: &Gradients,
    lambda: f64,
) -> Result<Model> {
    if !congruent(benign, prev_global) {
        return Err(Error::ShapeError(
            "benign update and previous global model have different structures".into(),
        ));
    }
    if !delta.matches_model(benign) {
        return Err(Error::ShapeError(
            "backdoor direction does not match the update's layer shapes".into(),
        ));
    }
    if !lambda.is_finite() {
        return Err(Error::NonFinite(format!("backdoor intensity {lambda}")));
    }
    let mut out = benign.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    for (layer, d) in out.layers.iter_mut().zip(delta.layers.iter()) {
        layer.weight.add_scaled(&d.weight, lambda);
        layer.bias.add_scaled(&d.bias, lambda);
    }
    out.validate()?;
    Ok(out)
}

/// The standard backdoor direction: one unit on the output bias of the
/// target class, zero everywhere else, so the attack pushes every input
/// toward that class.
pub fn default_backdoor_delta(model: &Model, target_class: usize) -> Result<Gradients> {
    if target_class >= model.arch.output_dim {
        return Err(Error::BadConfig(format!(
            "target class {target_class} out of range for {} outputs",
            model.arch.output_dim
        )));
    }
    let mut delta = Gradients::zeros_like(model);
    let out_idx = model.layers.len() - 1;
    delta.layers[out_idx].bias.data_mut()[target_class] = 1.0;
    Ok(delta)
}

/// Deterministically permutes the shard's labels, preserving the multiset.
/// When more than one distinct label is present, permutations are redrawn
/// (up to 100 times) until at least one label actually moves.
pub fn shuffle_labels(shard: &Shard, seed: u64) -> Shard {
    let mut rng = rng_from(&[stream::LABEL_SHUFFLE, seed, shard.client_id as u64]);
    let mut out = shard.clone();
    for _ in 0..100 {
        let mut labels = shard.data.labels.clone();
        labels.shuffle(&mut rng);
        let moved = labels
            .iter()
            .zip(shard.data.labels.iter())
            .any(|(a, b)| a != b);
        out.data.labels = labels;
        if moved {
            break;
        }
    }
    out
}

/// Index of the candidate with the most parameters, ties toward the first.
/// Attackers choose the largest architecture to maximize the region of the
/// global model only they contribute to.
pub fn malicious_arch_index(candidates: &[ArchSpec]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::BadConfig("empty architecture candidate list".into()));
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if c.param_count() > candidates[best].param_count() {
            best = i;
        }
    }
    Ok(best)
}

/// The candidate picked by [`malicious_arch_index`].
pub fn malicious_arch_choice(candidates: &[ArchSpec]) -> Result<&ArchSpec> {
    Ok(&candidates[malicious_arch_index(candidates)?])
}

/// Fixed-for-the-experiment malicious subset: `round(fraction * n)` client
/// ids drawn uniformly without replacement from the attack seed.
pub fn select_malicious(
    n_clients: usize,
    fraction: f64,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::BadConfig(format!(
            "fraction_malicious must lie in [0, 1], got {fraction}"
        )));
    }
    let count = ((fraction * n_clients as f64).round() as usize).min(n_clients);
    let mut ids: Vec<usize> = (0..n_clients).collect();
    let mut rng = rng_from(&[stream::MALICIOUS_PICK, seed]);
    ids.shuffle(&mut rng);
    let _ = rng.gen::<u64>(); // decouple subsequent draws from the shuffle
    Ok(ids.into_iter().take(count).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_blobs;
    use crate::model::build_model;
    use crate::oracles;

    fn arch(sections: Vec<(usize, usize)>) -> ArchSpec {
        ArchSpec::new(3, 4, sections, "adv").unwrap()
    }

    #[test]
    fn zero_intensity_returns_the_benign_model_bit_exactly() {
        let a = arch(vec![(2, 5)]);
        let benign = build_model(&a, 1).unwrap();
        let prev = build_model(&a, 2).unwrap();
        let delta = default_backdoor_delta(&benign, 2).unwrap();
        let out = backdoor_update(&benign, &prev, &delta, 0.0).unwrap();
        assert_eq!(out, benign);
    }

    #[test]
    fn unit_delta_shifts_the_target_parameter_by_lambda() {
        let a = arch(vec![(1, 4)]);
        let benign = build_model(&a, 3).unwrap();
        let prev = build_model(&a, 4).unwrap();
        let delta = default_backdoor_delta(&benign, 1).unwrap();
        let out = backdoor_update(&benign, &prev, &delta, 20.0).unwrap();
        let out_idx = benign.layers.len() - 1;
        // Fresh biases are zero, so the shifted bias is exactly 20.
        assert_eq!(out.layers[out_idx].bias.data()[1], 20.0);
        assert_eq!(out.layers[out_idx].bias.data()[0], 0.0);
        assert_eq!(out.layers[out_idx].weight, benign.layers[out_idx].weight);
    }

    #[test]
    fn attack_norm_scales_linearly_with_lambda() {
        let a = arch(vec![(2, 4), (1, 3)]);
        let benign = build_model(&a, 5).unwrap();
        let prev = build_model(&a, 6).unwrap();
        let mut delta = Gradients::zeros_like(&benign);
        for (i, g) in delta.layers.iter_mut().enumerate() {
            g.weight.data_mut()[0] = 0.25 * (i + 1) as f64;
        }
        for lambda in [0.5, 3.0, 20.0] {
            let out = backdoor_update(&benign, &prev, &delta, lambda).unwrap();
            let mut diff_sq = 0.0;
            for (x, y) in out.layers.iter().zip(benign.layers.iter()) {
                for (a, b) in x.weight.data().iter().zip(y.weight.data()) {
                    diff_sq += (a - b) * (a - b);
                }
                for (a, b) in x.bias.data().iter().zip(y.bias.data()) {
                    diff_sq += (a - b) * (a - b);
                }
            }
            let expected = lambda * delta.l2_norm();
            assert!((diff_sq.sqrt() - expected).abs() < 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let benign = build_model(&arch(vec![(1, 4)]), 7).unwrap();
        let other = build_model(&arch(vec![(2, 4)]), 8).unwrap();
        let delta = default_backdoor_delta(&benign, 0).unwrap();
        let err = backdoor_update(&benign, &other, &delta, 1.0).unwrap_err();
        assert!(err.to_string().contains("shape-error"));
        let wide_delta = default_backdoor_delta(&other, 0).unwrap();
        let prev = build_model(&arch(vec![(1, 4)]), 9).unwrap();
        let err = backdoor_update(&benign, &prev, &wide_delta, 1.0).unwrap_err();
        assert!(err.to_string().contains("shape-error"));
        assert!(default_backdoor_delta(&benign, 4).is_err());
    }

    fn shard_with(labels_seed: u64) -> Shard {
        let data = gen_gaussian_blobs(4, 3, 5, 0.5, labels_seed).unwrap();
        let active = (0..4).collect();
        Shard {
            client_id: 3,
            data,
            active_classes: active,
        }
    }

    #[test]
    fn label_shuffle_preserves_the_multiset_and_moves_something() {
        let shard = shard_with(11);
        let shuffled = shuffle_labels(&shard, 42);
        let mut before = shard.data.labels.clone();
        let mut after = shuffled.data.labels.clone();
        assert_ne!(before, after);
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
        assert_eq!(shuffled.data.inputs, shard.data.inputs);
        // Determinism in the seed.
        assert_eq!(
            shuffle_labels(&shard, 42).data.labels,
            shuffle_labels(&shard, 42).data.labels
        );
        assert_ne!(
            shuffle_labels(&shard, 42).data.labels,
            shuffle_labels(&shard, 43).data.labels
        );
    }

    #[test]
    fn single_class_shards_shuffle_to_themselves() {
        let data = gen_gaussian_blobs(1, 2, 6, 0.1, 3).unwrap();
        let shard = Shard {
            client_id: 0,
            data,
            active_classes: [0].into_iter().collect(),
        };
        let shuffled = shuffle_labels(&shard, 9);
        assert_eq!(shuffled.data.labels, shard.data.labels);
    }

    #[test]
    fn attackers_take_the_largest_candidate() {
        let grid = vec![
            arch(vec![(1, 4)]),
            arch(vec![(3, 8)]),
            arch(vec![(2, 6)]),
        ];
        let idx = malicious_arch_index(&grid).unwrap();
        assert_eq!(idx, 1);
        let by_oracle: usize = (0..grid.len())
            .max_by_key(|&i| oracles::model_param_count_oracle(&grid[i]))
            .unwrap();
        assert_eq!(idx, by_oracle);
        assert_eq!(malicious_arch_choice(&grid).unwrap(), &grid[1]);
        // Ties resolve to the first candidate.
        let tied = vec![arch(vec![(2, 5)]), arch(vec![(2, 5)])];
        assert_eq!(malicious_arch_index(&tied).unwrap(), 0);
        assert!(malicious_arch_index(&[]).is_err());
    }

    #[test]
    fn malicious_selection_rounds_the_fraction() {
        assert_eq!(select_malicious(10, 0.2, 1).unwrap().len(), 2);
        assert_eq!(select_malicious(10, 0.0, 1).unwrap().len(), 0);
        assert_eq!(select_malicious(10, 1.0, 1).unwrap().len(), 10);
        assert_eq!(select_malicious(8, 0.2, 1).unwrap().len(), 2); // 1.6 rounds up
        assert!(select_malicious(10, 1.5, 1).is_err());
        let a = select_malicious(20, 0.3, 5).unwrap();
        let b = select_malicious(20, 0.3, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|c| *c < 20));
    }

    #[test]
    fn attack_config_validation_and_mode_queries() {
        let mut cfg = AttackConfig {
            fraction_malicious: 0.2,
            lambda: 20.0,
            mode: AttackMode::Both,
            seed: 1,
            target_class: 0,
        };
        cfg.validate().unwrap();
        assert!(cfg.shuffles_labels() && cfg.adds_backdoor());
        cfg.mode = AttackMode::LabelShuffle;
        assert!(cfg.shuffles_labels() && !cfg.adds_backdoor());
        cfg.fraction_malicious = -0.1;
        assert!(cfg.validate().is_err());
        cfg.fraction_malicious = 0.5;
        cfg.lambda = f64::NAN;
        assert!(cfg.validate().is_err());
        let parsed: AttackConfig = serde_json::from_str(
            r#"{"fraction_malicious":0.1,"lambda":1.0,"mode":"label_shuffle","seed":3}"#,
        )
        .unwrap();
        assert_eq!(parsed.target_class, 0);
        assert!(serde_json::from_str::<AttackConfig>(
            r#"{"fraction_malicious":0.1,"lambda":1.0,"mode":"label_shuffle","seed":3,"x":1}"#
        )
        .is_err());
    }
}

//! Grafting: growing a trained model to a larger architecture without
//! retraining.
//!
//! Depth grafting appends parameter-identical copies of each section's last
//! residual block until the section reaches its target depth; because a
//! block maps a width onto itself, the copies slot in without any shape
//! changes. Width grafting duplicates the most important filters (rows with
//! the largest Euclidean norm) of each section and mirrors the duplication
//! through every layer that shares the section's coordinates, including the
//! consumers of its output.

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::model::{Layer, LayerKind, Model};
use crate::tensor::Tensor;

/// How width grafting treats the consumers of duplicated filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterGraftMode {
    /// Duplicated coordinates are appended verbatim; downstream layers then
    /// see each duplicated filter twice, amplifying its contribution.
    RawAppendix,
    /// Every consumer column of a duplicated coordinate is divided by the
    /// coordinate's multiplicity, so the grafted model computes exactly the
    /// same function as the donor.
    #[default]
    FunctionPreserving,
}

/// Appends copies of each section's last block until the section holds
/// `target_depths[s]` blocks. Targets below the current depth are rejected
/// with a cannot-shrink error. Widths are untouched, so the result computes
/// a different function only through the appended blocks.
pub fn layer_graft(model: &Model, target_depths: &[usize]) -> Result<Model> {
    let arch = &model.arch;
    if target_depths.len() != arch.n_sections() {
        return Err(Error::ShapeError(format!(
            "{} depth targets for {} sections",
            target_depths.len(),
            arch.n_sections()
        )));
    }
    for (s, sec) in arch.sections.iter().enumerate() {
        if target_depths[s] < sec.depth {
            return Err(Error::CannotShrink(format!(
                "section {s} has depth {} but the target asks for {}",
                sec.depth, target_depths[s]
            )));
        }
    }
    let pairs: Vec<(usize, usize)> = arch
        .sections
        .iter()
        .zip(target_depths)
        .map(|(sec, &d)| (d, sec.width))
        .collect();
    let target = ArchSpec::new(arch.input_dim, arch.output_dim, pairs, &arch.seed_tag)?;

    let mut layers = Vec::new();
    for layer in &model.layers {
        layers.push(layer.clone());
        let s = layer.section;
        if layer.kind == LayerKind::BlockLinear
            && layer.block_index + 1 == arch.sections[s].depth
        {
            for extra in 0..target_depths[s] - arch.sections[s].depth {
                let mut copy = layer.clone();
                copy.block_index = arch.sections[s].depth + extra;
                layers.push(copy);
            }
        }
    }
    let grafted = Model {
        arch: target,
        layers,
    };
    grafted.validate()?;
    Ok(grafted)
}

/// Row norms of a weight matrix, one per output coordinate.
fn row_norms(weight: &Tensor) -> Vec<f64> {
    (0..weight.n_rows())
        .map(|i| weight.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Indices of the `delta` rows with the largest Euclidean norm, ties toward
/// the lower index, cycling with repetition when `delta` exceeds the row
/// count.
pub fn top_rows(weight: &Tensor, delta: usize) -> Vec<usize> {
    let norms = row_norms(weight);
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    (0..delta).map(|k| order[k % order.len()]).collect()
}

/// Per-section duplication plan: a map from new coordinates to donor
/// coordinates and the reciprocal multiplicity of every donor coordinate.
#[derive(Clone)]
struct WidthPlan {
    /// `new -> old` coordinate map of length `target_width`; the first
    /// `old_width` entries are the identity.
    map: Vec<usize>,
    /// `1 / multiplicity` per donor coordinate (all ones in raw mode).
    col_scale: Vec<f64>,
}

fn width_plan(entry_weight: &Tensor, old: usize, new: usize, mode: FilterGraftMode) -> WidthPlan {
    let mut map: Vec<usize> = (0..old).collect();
    map.extend(top_rows(entry_weight, new - old));
    let mut mult = vec![0usize; old];
    for &src in &map {
        mult[src] += 1;
    }
    let col_scale = match mode {
        FilterGraftMode::RawAppendix => vec![1.0; old],
        FilterGraftMode::FunctionPreserving => {
            mult.iter().map(|&m| 1.0 / m as f64).collect()
        }
    };
    WidthPlan { map, col_scale }
}

fn duplicate_rows(t: &Tensor, plan: &WidthPlan) -> Tensor {
    let cols = t.n_cols();
    let mut data = Vec::with_capacity(plan.map.len() * cols);
    for &src in &plan.map {
        data.extend_from_slice(t.row(src));
    }
    Tensor::new(vec![plan.map.len(), cols], data).expect("row duplication is well-formed")
}

fn duplicate_cols(t: &Tensor, plan: &WidthPlan) -> Tensor {
    let rows = t.n_rows();
    let mut data = Vec::with_capacity(rows * plan.map.len());
    for i in 0..rows {
        let row = t.row(i);
        for &src in &plan.map {
            data.push(row[src] * plan.col_scale[src]);
        }
    }
    Tensor::new(vec![rows, plan.map.len()], data).expect("column duplication is well-formed")
}

fn duplicate_vec(t: &Tensor, plan: &WidthPlan) -> Tensor {
    let data = plan.map.iter().map(|&src| t.data()[src]).collect();
    Tensor::vector(data).expect("vector duplication is well-formed")
}

fn identity_plan(width: usize) -> WidthPlan {
    WidthPlan {
        map: (0..width).collect(),
        col_scale: vec![1.0; width],
    }
}

/// Widens each section to `target_widths[s]` by duplicating its most
/// important filters. Importance is read once per section from the donor's
/// entry-layer row norms, and the same duplication map is applied to every
/// layer touching the section's coordinates, which keeps the skip
/// connections consistent. Depths are untouched. Targets below the current
/// width are rejected with a cannot-shrink error.
pub fn filter_graft(
    model: &Model,
    target_widths: &[usize],
    mode: FilterGraftMode,
) -> Result<Model> {
    let arch = &model.arch;
    if target_widths.len() != arch.n_sections() {
        return Err(Error::ShapeError(format!(
            "{} width targets for {} sections",
            target_widths.len(),
            arch.n_sections()
        )));
    }
    for (s, sec) in arch.sections.iter().enumerate() {
        if target_widths[s] < sec.width {
            return Err(Error::CannotShrink(format!(
                "section {s} has width {} but the target asks for {}",
                sec.width, target_widths[s]
            )));
        }
    }
    let pairs: Vec<(usize, usize)> = arch
        .sections
        .iter()
        .zip(target_widths)
        .map(|(sec, &w)| (sec.depth, w))
        .collect();
    let target = ArchSpec::new(arch.input_dim, arch.output_dim, pairs, &arch.seed_tag)?;

    // All plans come from the donor model before anything is modified.
    let plans: Vec<WidthPlan> = arch
        .sections
        .iter()
        .enumerate()
        .map(|(s, sec)| {
            let entry = model
                .layers
                .iter()
                .find(|l| l.kind == LayerKind::EntryLinear && l.section == s)
                .expect("validated model has an entry per section");
            width_plan(&entry.weight, sec.width, target_widths[s], mode)
        })
        .collect();

    let mut layers = Vec::new();
    for layer in &model.layers {
        let s = layer.section;
        let grafted = match layer.kind {
            LayerKind::EntryLinear => {
                let in_plan = if s == 0 {
                    identity_plan(arch.input_dim)
                } else {
                    plans[s - 1].clone()
                };
                let widened = duplicate_cols(&layer.weight, &in_plan);
                Layer {
                    weight: duplicate_rows(&widened, &plans[s]),
                    bias: duplicate_vec(&layer.bias, &plans[s]),
                    ..layer.clone()
                }
            }
            LayerKind::StaticNorm => Layer {
                weight: duplicate_rows(&layer.weight, &plans[s]),
                bias: duplicate_vec(&layer.bias, &plans[s]),
                norm_mean: layer.norm_mean.as_ref().map(|m| duplicate_vec(m, &plans[s])),
                norm_std: layer.norm_std.as_ref().map(|v| duplicate_vec(v, &plans[s])),
                ..layer.clone()
            },
            LayerKind::BlockLinear => Layer {
                weight: duplicate_rows(&duplicate_cols(&layer.weight, &plans[s]), &plans[s]),
                bias: duplicate_vec(&layer.bias, &plans[s]),
                ..layer.clone()
            },
            LayerKind::OutputLinear => Layer {
                weight: duplicate_cols(&layer.weight, &plans[arch.n_sections() - 1]),
                ..layer.clone()
            },
        };
        layers.push(grafted);
    }
    let grafted = Model {
        arch: target,
        layers,
    };
    grafted.validate()?;
    Ok(grafted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::model::{build_model, extract_submodel, LayerKey};
    use crate::oracles;
    use crate::training::forward;
    use proptest::prelude::*;

    fn arch(sections: Vec<(usize, usize)>) -> ArchSpec {
        ArchSpec::new(3, 4, sections, "graft").unwrap()
    }

    fn random_inputs(n: usize, dim: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::seed::rng_from(&[0xfeed, seed]);
        let data = (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![n, dim], data).unwrap()
    }

    #[test]
    fn depth_graft_with_equal_targets_is_identity() {
        let m = build_model(&arch(vec![(2, 5), (1, 3)]), 3).unwrap();
        let same = layer_graft(&m, &[2, 1]).unwrap();
        assert_eq!(m, same);
    }

    #[test]
    fn depth_graft_appends_copies_of_the_last_block() {
        let m = build_model(&arch(vec![(2, 5)]), 5).unwrap();
        let grown = layer_graft(&m, &[4]).unwrap();
        assert_eq!(grown.arch.sections[0].depth, 4);
        let donor = m.layer(LayerKey::Block(0, 1)).unwrap();
        for b in [2, 3] {
            let copy = grown.layer(LayerKey::Block(0, b)).unwrap();
            assert_eq!(copy.weight, donor.weight);
            assert_eq!(copy.bias, donor.bias);
        }
        assert_eq!(
            grown.layer(LayerKey::Block(0, 0)).unwrap().weight,
            m.layer(LayerKey::Block(0, 0)).unwrap().weight
        );
        assert_eq!(
            grown.layer(LayerKey::Entry(0)).unwrap().weight,
            m.layer(LayerKey::Entry(0)).unwrap().weight
        );
    }

    #[test]
    fn depth_graft_then_extract_round_trips() {
        let a = arch(vec![(1, 4), (2, 6)]);
        let m = build_model(&a, 7).unwrap();
        let grown = layer_graft(&m, &[3, 2]).unwrap();
        let back = extract_submodel(&grown, &a).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn depth_graft_rejects_shrinking() {
        let m = build_model(&arch(vec![(3, 4)]), 1).unwrap();
        let err = layer_graft(&m, &[2]).unwrap_err();
        assert!(err.to_string().contains("cannot-shrink"));
        assert!(layer_graft(&m, &[3, 3]).is_err());
    }

    #[test]
    fn top_rows_ranks_by_norm_with_low_index_ties() {
        let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(top_rows(&w, 1), vec![0]);
        assert_eq!(top_rows(&w, 2), vec![0, 2]);
        assert_eq!(top_rows(&w, 5), vec![0, 2, 1, 0, 2]);
        let tied = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(top_rows(&tied, 2), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn top_rows_matches_the_sorting_oracle(
            rows in 1usize..6,
            cols in 1usize..4,
            delta in 0usize..10,
            seed in 0u64..500,
        ) {
            let t = random_inputs(rows, cols, seed);
            prop_assert_eq!(top_rows(&t, delta), oracles::top_rows_oracle(&t, delta));
        }
    }

    #[test]
    fn width_graft_with_equal_targets_is_identity() {
        let m = build_model(&arch(vec![(2, 5), (1, 3)]), 9).unwrap();
        let same = filter_graft(&m, &[5, 3], FilterGraftMode::FunctionPreserving).unwrap();
        assert_eq!(m, same);
    }

    #[test]
    fn function_preserving_width_graft_keeps_outputs() {
        let a = arch(vec![(2, 5), (1, 3)]);
        let m = build_model(&a, 11).unwrap();
        let x = random_inputs(6, 3, 1);
        let before = forward(&m, &x, None).unwrap();
        let grown = filter_graft(&m, &[8, 7], FilterGraftMode::FunctionPreserving).unwrap();
        assert_eq!(grown.arch.sections[0].width, 8);
        assert_eq!(grown.arch.sections[1].width, 7);
        let after = forward(&grown, &x, None).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-12);
    }

    #[test]
    fn raw_appendix_amplifies_duplicated_filters() {
        // One unit widened to two: the output layer sees the duplicated
        // coordinate twice at full weight, doubling the logit contribution
        // of the linear path.
        let a = ArchSpec::new(1, 1, vec![(1, 1)], "amp").unwrap();
        let mut m = build_model(&a, 0).unwrap();
        m.layer_mut(LayerKey::Entry(0)).unwrap().weight = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let b = m.layer_mut(LayerKey::Block(0, 0)).unwrap();
        b.weight = Tensor::from_rows(&[vec![0.0]]).unwrap();
        m.layer_mut(LayerKey::Output).unwrap().weight = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![2.0]]).unwrap();
        // Donor computes relu(2) = 2 through a pure skip, logit 2.
        assert_eq!(forward(&m, &x, None).unwrap().get2(0, 0), 2.0);
        let raw = filter_graft(&m, &[2], FilterGraftMode::RawAppendix).unwrap();
        assert_eq!(forward(&raw, &x, None).unwrap().get2(0, 0), 4.0);
        let fp = filter_graft(&m, &[2], FilterGraftMode::FunctionPreserving).unwrap();
        assert_eq!(forward(&fp, &x, None).unwrap().get2(0, 0), 2.0);
    }

    #[test]
    fn width_graft_duplicates_the_top_donor_rows() {
        let a = ArchSpec::new(2, 2, vec![(1, 3)], "pick").unwrap();
        let mut m = build_model(&a, 0).unwrap();
        m.layer_mut(LayerKey::Entry(0)).unwrap().weight =
            Tensor::from_rows(&[vec![3.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let grown = filter_graft(&m, &[4], FilterGraftMode::RawAppendix).unwrap();
        let entry = grown.layer(LayerKey::Entry(0)).unwrap();
        // Row 0 has the largest norm, so coordinate 3 is its copy.
        assert_eq!(entry.weight.row(3), entry.weight.row(0));
        let norm = grown.layer(LayerKey::Norm(0)).unwrap();
        assert_eq!(norm.weight.get2(3, 0), norm.weight.get2(0, 0));
        assert_eq!(norm.norm_std.as_ref().unwrap().data()[3], 1.0);
        let block = grown.layer(LayerKey::Block(0, 0)).unwrap();
        assert_eq!(block.weight.shape(), &[4, 4]);
        assert_eq!(block.weight.get2(3, 3), block.weight.get2(0, 0));
    }

    #[test]
    fn width_graft_rejects_shrinking_and_bad_arity() {
        let m = build_model(&arch(vec![(1, 4)]), 2).unwrap();
        let err = filter_graft(&m, &[3], FilterGraftMode::FunctionPreserving).unwrap_err();
        assert!(err.to_string().contains("cannot-shrink"));
        let err = filter_graft(&m, &[4, 4], FilterGraftMode::FunctionPreserving).unwrap_err();
        assert!(err.to_string().contains("shape-error"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn width_graft_preserves_the_function_for_any_growth(
            w1 in 1usize..5,
            w2 in 1usize..5,
            grow1 in 0usize..6,
            grow2 in 0usize..6,
            d1 in 1usize..3,
            d2 in 1usize..3,
            seed in 0u64..1000,
        ) {
            let a = arch(vec![(d1, w1), (d2, w2)]);
            let m = build_model(&a, seed).unwrap();
            let x = random_inputs(4, 3, seed ^ 0xabc);
            let before = forward(&m, &x, None).unwrap();
            let grown = filter_graft(
                &m,
                &[w1 + grow1, w2 + grow2],
                FilterGraftMode::FunctionPreserving,
            ).unwrap();
            grown.validate().unwrap();
            let after = forward(&grown, &x, None).unwrap();
            prop_assert!(before.max_abs_diff(&after) < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn depth_graft_composes_with_extraction(
            d in 1usize..4,
            grow in 0usize..4,
            w in 1usize..5,
            seed in 0u64..1000,
        ) {
            let a = arch(vec![(d, w)]);
            let m = build_model(&a, seed).unwrap();
            let grown = layer_graft(&m, &[d + grow]).unwrap();
            grown.validate().unwrap();
            let back = extract_submodel(&grown, &a).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}

//! Shows the two grafting directions: deepening a model by appending block
//! copies (and extracting it back out unchanged), and widening a model by
//! duplicating its strongest filters without changing what it computes.

use fedfa::arch::ArchSpec;
use fedfa::data::gen_gaussian_blobs;
use fedfa::grafting::{filter_graft, layer_graft, FilterGraftMode};
use fedfa::model::{build_model, extract_submodel};
use fedfa::training::forward;

fn main() -> fedfa::Result<()> {
    let arch = ArchSpec::new(6, 4, vec![(1, 5), (2, 7)], "narrow")?;
    let model = build_model(&arch, 11)?;

    // Depth: graft to three and four blocks per section, then slice the
    // original architecture back out.
    let deep = layer_graft(&model, &[3, 4])?;
    let back = extract_submodel(&deep, &arch)?;
    println!(
        "deepened {:?} -> {:?}, round-trip max diff {:e}",
        arch.sections, deep.arch.sections,
        back.max_abs_param_diff(&model)
    );

    // Width: duplicate filters up to 9 and 10 channels. The function-
    // preserving mode splits each duplicated filter's outgoing weights, so
    // the widened model scores every input identically.
    let wide = filter_graft(&model, &[9, 10], FilterGraftMode::FunctionPreserving)?;
    let probe = gen_gaussian_blobs(4, 6, 25, 1.0, 7)?;
    let before = forward(&model, &probe.inputs, None)?;
    let after = forward(&wide, &probe.inputs, None)?;
    let worst = before
        .data()
        .iter()
        .zip(after.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("widened  {:?} -> {:?}, forward max diff {worst:e}", arch.sections, wide.arch.sections);

    let raw = filter_graft(&model, &[9, 10], FilterGraftMode::RawAppendix)?;
    let after = forward(&raw, &probe.inputs, None)?;
    let worst = before
        .data()
        .iter()
        .zip(after.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("raw-appendix widening changes outputs by up to {worst:.3} (expected: nonzero)");
    Ok(())
}

//! Aggregates three clients of different shapes with the grafting server and
//! prints the per-layer scale factors and contribution coverage.

use fedfa::aggregation::{aggregate_fedfa, AggOptions, ClientUpdate};
use fedfa::arch::ArchSpec;
use fedfa::model::build_model;

fn main() -> fedfa::Result<()> {
    let global_arch = ArchSpec::new(8, 5, vec![(2, 10), (2, 10)], "global")?;
    let prev = build_model(&global_arch, 1)?;

    let rosters = [
        ("tiny", 30, vec![(1, 6), (1, 6)]),
        ("mid", 45, vec![(2, 8), (1, 8)]),
        ("full", 25, vec![(2, 10), (2, 10)]),
    ];
    let mut updates = Vec::new();
    for (i, (name, n, sections)) in rosters.into_iter().enumerate() {
        let arch = ArchSpec::new(8, 5, sections, name)?;
        updates.push(ClientUpdate {
            client_id: i,
            n_samples: n,
            model: build_model(&arch, 100 + i as u64)?,
        });
    }

    let (global, report) = aggregate_fedfa(&prev, &updates, &AggOptions::default())?;
    println!("aggregated into '{}' ({} parameters)", global.arch.seed_tag, global.param_count());
    println!("gamma complete: {}", report.gamma_complete);
    println!();

    println!("layer        mean_norm  alphas (client: value)");
    for entry in &report.layer_scales {
        let scales: Vec<String> = entry
            .scales
            .iter()
            .map(|(cid, a)| format!("{cid}: {a:.3}"))
            .collect();
        println!("{:<12} {:.4}     {}", entry.key.to_string(), entry.mean_norm, scales.join("  "));
    }
    println!();

    println!("layer        coverage");
    for c in &report.coverage {
        println!("{:<12} {:.0}%", c.key.to_string(), c.covered * 100.0);
    }
    Ok(())
}

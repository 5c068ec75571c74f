//! Runs the shipped robustness scenario under every heterogeneous aggregator,
//! once clean and once with the backdoor cohort enabled, and prints the final
//! global accuracies side by side. Takes around half a minute.

use fedfa::config::ExperimentConfig;
use fedfa::experiment::run_experiment;

fn main() -> fedfa::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/robustness.json");
    let base = ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?;

    println!("aggregator   benign   attacked   drop");
    for aggregator in ["fedfa", "heterofl", "flexifed", "nefl"] {
        let mut benign = base.clone();
        benign.aggregator = aggregator.to_string();
        benign.attack = None;
        benign.validate()?;
        let clean = run_experiment(&benign)?.final_global_acc();

        let mut attacked = base.clone();
        attacked.aggregator = aggregator.to_string();
        attacked.validate()?;
        let hit = run_experiment(&attacked)?.final_global_acc();

        println!(
            "{:<12} {:.3}    {:.3}      {:+.1} pts",
            aggregator,
            clean,
            hit,
            (hit - clean) * 100.0
        );
    }
    Ok(())
}

//! Loads a JSON experiment config from disk and runs it end to end. The same
//! files drive the command line tool; try `configs/robustness.json` for the
//! backdoor scenario.

use fedfa::config::ExperimentConfig;
use fedfa::experiment::run_experiment;

fn main() -> fedfa::Result<()> {
    let default = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/quickstart.json");
    let path = std::env::args().nth(1).unwrap_or_else(|| default.to_string());
    println!("config: {path}");

    let config = ExperimentConfig::from_json(&std::fs::read_to_string(&path)?)?;
    config.validate()?;
    let report = run_experiment(&config)?;

    println!("initial global acc: {:.3}", report.initial_global_acc);
    println!("round  participants  global_acc  local_acc_mean  train_loss");
    for m in &report.metrics {
        println!(
            "{:>5}  {:>12}  {:>10.3}  {:>14.3}  {:>10.4}",
            m.round,
            m.participants.len(),
            m.global_acc,
            m.local_acc_mean,
            m.train_loss_mean
        );
    }
    println!("final global acc: {:.3}", report.final_global_acc());
    Ok(())
}

//! Shows where a boosted backdoor lands after aggregation. Under the scaled
//! grafting server a planted bias shift is divided across the whole cohort
//! and damped by the attacker's scale factor; under an unscaled baseline a
//! position owned by the attacker alone absorbs the full boost.

use fedfa::adversary::{backdoor_update, default_backdoor_delta};
use fedfa::aggregation::{aggregate_fedfa, AggOptions, Aggregator, ClientUpdate};
use fedfa::arch::ArchSpec;
use fedfa::model::{build_model, LayerKey};
use fedfa::training::Gradients;

fn main() -> fedfa::Result<()> {
    let opts = AggOptions::default();
    let lambda = 20.0;

    // Ten equal-weight clients, one of them boosted. The planted delta nudges
    // the output bias toward class 0.
    let arch = ArchSpec::new(4, 8, vec![(1, 4)], "flat")?;
    let prev = build_model(&arch, 5)?;
    let benign = prev.clone();
    let delta = default_backdoor_delta(&benign, 0)?;
    let malicious = backdoor_update(&benign, &prev, &delta, lambda)?;

    let roster = |attacker: &fedfa::model::Model| -> Vec<ClientUpdate> {
        (0..10)
            .map(|cid| ClientUpdate {
                client_id: cid,
                n_samples: 8,
                model: if cid == 7 { attacker.clone() } else { benign.clone() },
            })
            .collect()
    };
    let (clean, _) = aggregate_fedfa(&prev, &roster(&benign), &opts)?;
    let (hit, report) = aggregate_fedfa(&prev, &roster(&malicious), &opts)?;

    let bias0 = |m: &fedfa::model::Model| m.layer(LayerKey::Output).unwrap().bias.data()[0];
    let alpha_mal = report
        .layer_scales
        .iter()
        .find(|e| e.key == LayerKey::Output)
        .unwrap()
        .scales
        .iter()
        .find(|(cid, _)| *cid == 7)
        .unwrap()
        .1;
    println!("scaled aggregation, 10 clients, boost {lambda}");
    println!("  output bias[0] clean:    {:+.6}", bias0(&clean));
    println!("  output bias[0] attacked: {:+.6}", bias0(&hit));
    println!("  landed shift:            {:+.6}", bias0(&hit) - bias0(&clean));
    println!("  attacker alpha: {alpha_mal:.4}, cohort share 1/10");
    println!();

    // Two clients of different depths. Only the attacker reaches the deepest
    // block, so nothing averages the boost away there.
    let deep_arch = ArchSpec::new(4, 3, vec![(2, 4)], "deep")?;
    let shallow_arch = ArchSpec::new(4, 3, vec![(1, 4)], "shallow")?;
    let prev_deep = build_model(&deep_arch, 9)?;
    let bystander = build_model(&shallow_arch, 10)?;
    let attacker_base = build_model(&deep_arch, 11)?;

    let mut deep_delta = Gradients::zeros_like(&attacker_base);
    let idx = attacker_base
        .layers
        .iter()
        .position(|l| l.key() == LayerKey::Block(0, 1))
        .unwrap();
    deep_delta.layers[idx].bias.data_mut()[1] = 1.0;
    let attacker_hit = backdoor_update(&attacker_base, &prev_deep, &deep_delta, lambda)?;

    let deep_roster = |attacker: &fedfa::model::Model| -> Vec<ClientUpdate> {
        vec![
            ClientUpdate { client_id: 0, n_samples: 6, model: bystander.clone() },
            ClientUpdate { client_id: 1, n_samples: 6, model: attacker.clone() },
        ]
    };
    let (clean_deep, _) = Aggregator::NeFl.aggregate(&prev_deep, &deep_roster(&attacker_base), &opts)?;
    let (hit_deep, _) = Aggregator::NeFl.aggregate(&prev_deep, &deep_roster(&attacker_hit), &opts)?;

    let b = |m: &fedfa::model::Model| m.layer(LayerKey::Block(0, 1)).unwrap().bias.data()[1];
    println!("unscaled aggregation (nefl), lone owner of block (0,1)");
    println!("  bias[1] clean:    {:+.6}", b(&clean_deep));
    println!("  bias[1] attacked: {:+.6}", b(&hit_deep));
    println!("  landed shift:     {:+.6} (full boost)", b(&hit_deep) - b(&clean_deep));
    Ok(())
}

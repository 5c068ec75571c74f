//! The federated round loop: dataset synthesis, client setup, per-round
//! selection, local training, adversarial transforms, aggregation, and
//! evaluation.
//!
//! Everything is keyed off the experiment seed through named streams, so a
//! rerun of the same config reproduces every byte of the metrics output
//! regardless of how many worker threads execute the local updates.

use std::collections::BTreeSet;
use std::fs;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::adversary::{
    backdoor_update, default_backdoor_delta, malicious_arch_index, select_malicious,
    shuffle_labels,
};
use crate::aggregation::{AggregationReport, Aggregator, ClientUpdate};
use crate::arch::ArchSpec;
use crate::checkpoint;
use crate::config::{AssignmentPolicy, ExperimentConfig};
use crate::data::{
    gen_gaussian_blobs, make_test_sets, partition_iid, partition_noniid, Dataset, Shard,
};
use crate::error::{Error, Result};
use crate::model::{build_model, extract_submodel, Model};
use crate::seed::{mix, rng_from, stream};
use crate::training::{accuracy, local_update, shard_loss};

/// One simulated device: its data, its architecture, and its allegiance.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub arch: ArchSpec,
    pub shard: Shard,
    pub malicious: bool,
}

/// Picks candidate indices for clients a policy does not pin down. The
/// default draws from a per-client seeded stream; a model-search scorer can
/// be plugged in through [`assign_architectures_with`].
pub type ArchSelector<'a> = dyn Fn(usize, &[ArchSpec]) -> usize + Sync + 'a;

/// Maps each client to an index into `candidates` under the given policy,
/// using the default seeded selector for free choices.
pub fn assign_architectures(
    n_clients: usize,
    candidates: &[ArchSpec],
    policy: AssignmentPolicy,
    seed: u64,
) -> Result<Vec<usize>> {
    let pick = move |client_id: usize, cands: &[ArchSpec]| {
        let mut rng = rng_from(&[stream::ASSIGNMENT, seed, client_id as u64]);
        rng.gen_range(0..cands.len())
    };
    assign_architectures_with(n_clients, candidates, policy, &pick)
}

pub fn assign_architectures_with(
    n_clients: usize,
    candidates: &[ArchSpec],
    policy: AssignmentPolicy,
    selector: &ArchSelector,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::BadConfig("empty architecture candidate list".into()));
    }
    let minimal = candidates
        .iter()
        .enumerate()
        .min_by_key(|(_, a)| a.param_count())
        .map(|(i, _)| i)
        .expect("non-empty candidates");
    let choose = |client_id: usize| -> Result<usize> {
        let idx = selector(client_id, candidates);
        if idx >= candidates.len() {
            return Err(Error::BadConfig(format!(
                "architecture selector returned index {idx} for {} candidates",
                candidates.len()
            )));
        }
        Ok(idx)
    };
    match policy {
        AssignmentPolicy::HalfMinimal => {
            let cut = n_clients / 2;
            (0..n_clients)
                .map(|c| if c < cut { Ok(minimal) } else { choose(c) })
                .collect()
        }
        AssignmentPolicy::UniformRandom => (0..n_clients).map(choose).collect(),
        AssignmentPolicy::Fixed(i) => {
            if i >= candidates.len() {
                return Err(Error::BadConfig(format!(
                    "fixed assignment index {i} out of range for {} candidates",
                    candidates.len()
                )));
            }
            Ok(vec![i; n_clients])
        }
    }
}

/// Uniform sample of `m` distinct clients for one round, returned sorted.
pub fn select_participants(
    n_clients: usize,
    m: usize,
    seed: u64,
    round: usize,
) -> Result<Vec<usize>> {
    if m == 0 || m > n_clients {
        return Err(Error::BadConfig(format!(
            "cannot select {m} of {n_clients} clients"
        )));
    }
    let mut ids: Vec<usize> = (0..n_clients).collect();
    let mut rng = rng_from(&[stream::ROUND_SELECT, seed, round as u64]);
    ids.shuffle(&mut rng);
    ids.truncate(m);
    ids.sort_unstable();
    Ok(ids)
}

/// Per-round measurements. `wall_time` is informational only and never
/// serialized, so reruns produce comparable files.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub participants: Vec<usize>,
    pub global_acc: f64,
    pub local_acc_mean: f64,
    pub train_loss_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub gamma_complete: bool,
    pub wall_time: Duration,
}

pub const METRICS_HEADER: &str =
    "round,participants,global_acc,local_acc_mean,train_loss_mean,alpha_min,alpha_max,gamma_complete";

pub fn metrics_csv_row(m: &RoundMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.round,
        m.participants.len(),
        m.global_acc,
        m.local_acc_mean,
        m.train_loss_mean,
        m.alpha_min,
        m.alpha_max,
        m.gamma_complete
    )
}

pub fn render_metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&metrics_csv_row(m));
        out.push('\n');
    }
    out
}

/// Everything the round loop advances.
#[derive(Debug, Clone)]
pub struct ExperimentState {
    pub config: ExperimentConfig,
    pub aggregator: Aggregator,
    pub clients: Vec<ClientState>,
    pub global: Model,
    pub global_test: Dataset,
    pub local_tests: Vec<Dataset>,
}

/// Builds the full experiment state from a validated config: synthesizes
/// the task, partitions it, assigns architectures, fixes the malicious set
/// for the whole run, and initializes the global model at the grid maxima.
pub fn setup(config: &ExperimentConfig) -> Result<ExperimentState> {
    config.validate()?;
    let candidates = config.arch_specs()?;
    let global_arch = config.global_arch()?;
    let ds = &config.dataset;

    // One generation per experiment, split class-major so train and test
    // share blob centers but use disjoint noise draws.
    let per_class = ds.train_per_class + ds.test_per_class;
    let full = gen_gaussian_blobs(
        ds.n_classes,
        ds.dim,
        per_class,
        ds.spread,
        mix(&[stream::DATA_TRAIN, config.seed]),
    )?;
    let mut train_idx = Vec::with_capacity(ds.n_classes * ds.train_per_class);
    let mut test_idx = Vec::with_capacity(ds.n_classes * ds.test_per_class);
    for c in 0..ds.n_classes {
        let base = c * per_class;
        train_idx.extend(base..base + ds.train_per_class);
        test_idx.extend(base + ds.train_per_class..base + per_class);
    }
    let train = full.subset(&train_idx)?;
    let test = full.subset(&test_idx)?;

    let partition = match ds.partition.as_str() {
        "iid" => partition_iid(&train, config.n_clients, config.seed)?,
        "noniid" => partition_noniid(&train, config.n_clients, ds.class_fraction, config.seed)?,
        other => return Err(Error::BadConfig(format!("unknown partition '{other}'"))),
    };
    let (global_test, local_tests) = make_test_sets(&test, &partition.shards)?;

    let malicious: BTreeSet<usize> = match &config.attack {
        Some(a) if a.fraction_malicious > 0.0 => {
            select_malicious(config.n_clients, a.fraction_malicious, a.seed)?
        }
        _ => BTreeSet::new(),
    };

    let mut assignment = assign_architectures(
        config.n_clients,
        &candidates,
        config.assignment_policy()?,
        config.seed,
    )?;
    // A malicious operator claims the most capable architecture on offer,
    // maximizing the parameter surface its updates reach.
    if !malicious.is_empty() {
        let biggest = malicious_arch_index(&candidates)?;
        for &c in &malicious {
            assignment[c] = biggest;
        }
    }

    let clients: Vec<ClientState> = partition
        .shards
        .iter()
        .enumerate()
        .map(|(c, shard)| ClientState {
            client_id: c,
            arch: candidates[assignment[c]].clone(),
            shard: shard.clone(),
            malicious: malicious.contains(&c),
        })
        .collect();

    let global = build_model(&global_arch, config.seed)?;
    Ok(ExperimentState {
        config: config.clone(),
        aggregator: config.parsed_aggregator()?,
        clients,
        global,
        global_test,
        local_tests,
    })
}

/// One federated round: select, train locally (in parallel), apply
/// adversarial transforms, aggregate, evaluate. Local updates all use the
/// same round-keyed seed, so identically configured clients with identical
/// shards produce identical updates.
pub fn run_round(
    state: &mut ExperimentState,
    round: usize,
) -> Result<(RoundMetrics, AggregationReport)> {
    let start = Instant::now();
    let cfg = state.config.clone();
    let participants = select_participants(cfg.n_clients, cfg.m_selected(), cfg.seed, round)?;
    let train_seed = mix(&[stream::LOCAL_TRAIN, cfg.seed, round as u64]);
    let global = &state.global;

    let results: Result<Vec<(ClientUpdate, f64)>> = participants
        .par_iter()
        .map(|&c| {
            let client = &state.clients[c];
            let submodel = extract_submodel(global, &client.arch)?;
            let shard = match (&cfg.attack, client.malicious) {
                (Some(a), true) if a.shuffles_labels() => shuffle_labels(&client.shard, a.seed),
                _ => client.shard.clone(),
            };
            let mut trained = local_update(
                &submodel,
                &shard,
                cfg.local_epochs,
                cfg.lr,
                cfg.batch_size,
                train_seed,
            )?;
            let loss = shard_loss(&trained, &shard)?;
            if client.malicious {
                if let Some(a) = &cfg.attack {
                    if a.adds_backdoor() {
                        let delta = default_backdoor_delta(&trained, a.target_class)?;
                        trained = backdoor_update(&trained, &submodel, &delta, a.lambda)?;
                    }
                }
            }
            Ok((
                ClientUpdate {
                    client_id: c,
                    n_samples: shard.data.len(),
                    model: trained,
                },
                loss,
            ))
        })
        .collect();
    let results = results?;
    let train_loss_mean =
        results.iter().map(|(_, l)| *l).sum::<f64>() / results.len() as f64;
    let updates: Vec<ClientUpdate> = results.into_iter().map(|(u, _)| u).collect();

    let (new_global, report) =
        state
            .aggregator
            .aggregate(&state.global, &updates, &cfg.aggregation_options)?;
    state.global = new_global;

    let global_acc = accuracy(&state.global, &state.global_test, None)?;
    let mut acc_sum = 0.0;
    let mut acc_n = 0usize;
    for client in &state.clients {
        let local = &state.local_tests[client.client_id];
        if local.is_empty() {
            continue;
        }
        let sub = extract_submodel(&state.global, &client.arch)?;
        acc_sum += accuracy(&sub, local, Some(&client.shard.active_classes))?;
        acc_n += 1;
    }
    let local_acc_mean = if acc_n == 0 { 0.0 } else { acc_sum / acc_n as f64 };

    let metrics = RoundMetrics {
        round,
        participants,
        global_acc,
        local_acc_mean,
        train_loss_mean,
        alpha_min: report.alpha_min,
        alpha_max: report.alpha_max,
        gamma_complete: report.gamma_complete,
        wall_time: start.elapsed(),
    };
    Ok((metrics, report))
}

/// Final result of a run. `metrics_csv` is the exact text written to disk.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub initial_global_acc: f64,
    pub metrics: Vec<RoundMetrics>,
    pub agg_reports: Vec<AggregationReport>,
    pub final_global: Model,
    pub metrics_csv: String,
}

impl ExperimentReport {
    pub fn final_global_acc(&self) -> f64 {
        self.metrics
            .last()
            .map(|m| m.global_acc)
            .unwrap_or(self.initial_global_acc)
    }
}

/// Runs the configured number of rounds. With `rounds = 0` the report
/// carries only the initial evaluation and a header-only metrics table.
/// When `out_dir` is set, writes `metrics.csv`, a final `global.ckpt`, and
/// per-round snapshots if requested.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut state = setup(config)?;
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir)?;
        if config.save_snapshots {
            fs::create_dir_all(dir.join("snapshots"))?;
        }
    }
    let initial_global_acc = accuracy(&state.global, &state.global_test, None)?;
    let mut metrics = Vec::with_capacity(config.rounds);
    let mut agg_reports = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let (m, r) = run_round(&mut state, round).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })?;
        metrics.push(m);
        agg_reports.push(r);
        if config.save_snapshots {
            if let Some(dir) = &config.out_dir {
                checkpoint::save(
                    &state.global,
                    &dir.join("snapshots").join(format!("round_{round:04}.ckpt")),
                )?;
            }
        }
    }
    let metrics_csv = render_metrics_csv(&metrics);
    if let Some(dir) = &config.out_dir {
        fs::write(dir.join("metrics.csv"), &metrics_csv)?;
        checkpoint::save(&state.global, &dir.join("global.ckpt"))?;
    }
    Ok(ExperimentReport {
        initial_global_acc,
        metrics,
        agg_reports,
        final_global: state.global,
        metrics_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{AttackConfig, AttackMode};
    use crate::config::{CandidateArch, DatasetConfig};

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 11,
            rounds: 2,
            local_epochs: 1,
            lr: 0.05,
            batch_size: 8,
            n_clients: 4,
            participation: 1.0,
            aggregator: "fedfa".into(),
            candidates: vec![
                CandidateArch {
                    name: "small".into(),
                    sections: vec![[1, 4], [1, 6]],
                },
                CandidateArch {
                    name: "large".into(),
                    sections: vec![[2, 8], [3, 6]],
                },
            ],
            assignment: "paper_default".into(),
            attack: None,
            dataset: DatasetConfig {
                n_classes: 3,
                dim: 5,
                train_per_class: 24,
                test_per_class: 8,
                spread: 0.5,
                partition: "iid".into(),
                class_fraction: 0.2,
            },
            aggregation_options: Default::default(),
            save_snapshots: false,
            out_dir: None,
        }
    }

    fn archs() -> Vec<ArchSpec> {
        vec![
            ArchSpec::new(5, 3, vec![(1, 4)], "s").unwrap(),
            ArchSpec::new(5, 3, vec![(2, 8)], "l").unwrap(),
            ArchSpec::new(5, 3, vec![(1, 6)], "m").unwrap(),
        ]
    }

    #[test]
    fn half_minimal_assignment_pins_the_small_half() {
        let cands = archs();
        let got = assign_architectures(10, &cands, AssignmentPolicy::HalfMinimal, 3).unwrap();
        assert_eq!(got.len(), 10);
        // Candidate 0 has the fewest parameters.
        assert!(got[..5].iter().all(|&i| i == 0), "{got:?}");
        assert!(got[5..].iter().all(|&i| i < cands.len()));
        // Deterministic in the seed.
        let again = assign_architectures(10, &cands, AssignmentPolicy::HalfMinimal, 3).unwrap();
        assert_eq!(got, again);
        let other = assign_architectures(10, &cands, AssignmentPolicy::HalfMinimal, 4).unwrap();
        assert!(got[..5] == other[..5]);
    }

    #[test]
    fn fixed_and_uniform_policies_behave() {
        let cands = archs();
        let fixed = assign_architectures(6, &cands, AssignmentPolicy::Fixed(2), 0).unwrap();
        assert_eq!(fixed, vec![2; 6]);
        assert!(assign_architectures(6, &cands, AssignmentPolicy::Fixed(3), 0).is_err());
        let uni = assign_architectures(40, &cands, AssignmentPolicy::UniformRandom, 9).unwrap();
        assert!(uni.iter().all(|&i| i < cands.len()));
        // All three candidates appear across 40 seeded draws.
        for want in 0..cands.len() {
            assert!(uni.contains(&want), "candidate {want} never drawn");
        }
        // A selector that misbehaves is caught.
        let bad = |_: usize, _: &[ArchSpec]| 99usize;
        assert!(
            assign_architectures_with(4, &cands, AssignmentPolicy::UniformRandom, &bad).is_err()
        );
    }

    #[test]
    fn participant_sampling_is_uniform_without_replacement() {
        let got = select_participants(10, 4, 5, 0).unwrap();
        assert_eq!(got.len(), 4);
        assert!(got.windows(2).all(|w| w[0] < w[1]), "sorted, distinct");
        assert!(got.iter().all(|&c| c < 10));
        assert_eq!(got, select_participants(10, 4, 5, 0).unwrap());
        assert!(select_participants(10, 0, 5, 0).is_err());
        assert!(select_participants(10, 11, 5, 0).is_err());

        // Frequency sanity: over many rounds every client is picked about
        // C = 1/2 of the time. 400 rounds, expectation 200, allow 25%.
        let mut counts = [0usize; 10];
        for round in 0..400 {
            for c in select_participants(10, 5, 77, round).unwrap() {
                counts[c] += 1;
            }
        }
        for (c, &k) in counts.iter().enumerate() {
            assert!(
                (k as f64 - 200.0).abs() < 50.0,
                "client {c} selected {k} times"
            );
        }
    }

    #[test]
    fn setup_builds_a_consistent_state() {
        let cfg = small_config();
        let state = setup(&cfg).unwrap();
        assert_eq!(state.clients.len(), 4);
        assert_eq!(state.local_tests.len(), 4);
        // Global model sits at the per-section maxima of the grid.
        let g = &state.global.arch;
        assert_eq!(
            g.sections.iter().map(|s| (s.depth, s.width)).collect::<Vec<_>>(),
            vec![(2, 8), (3, 6)]
        );
        // The small half really is the small candidate.
        assert_eq!(state.clients[0].arch.seed_tag, "small");
        assert_eq!(state.clients[1].arch.seed_tag, "small");
        for c in &state.clients {
            assert!(c.arch.fits_within(g));
            assert!(!c.shard.data.is_empty());
            assert!(!c.malicious);
        }
    }

    #[test]
    fn malicious_clients_get_the_largest_candidate() {
        let mut cfg = small_config();
        cfg.attack = Some(AttackConfig {
            fraction_malicious: 0.25,
            lambda: 20.0,
            mode: AttackMode::AdditiveBackdoor,
            seed: 5,
            target_class: 0,
        });
        let state = setup(&cfg).unwrap();
        let bad: Vec<&ClientState> = state.clients.iter().filter(|c| c.malicious).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].arch.seed_tag, "large");
        // Rerun reproduces the same malicious set.
        let again = setup(&cfg).unwrap();
        for (a, b) in state.clients.iter().zip(again.clients.iter()) {
            assert_eq!(a.malicious, b.malicious);
        }
    }

    #[test]
    fn single_client_fedavg_round_equals_local_training() {
        let mut cfg = small_config();
        cfg.n_clients = 1;
        cfg.aggregator = "fedavg".into();
        cfg.assignment = "fixed:0".into();
        cfg.candidates.truncate(1);
        cfg.rounds = 1;
        let mut state = setup(&cfg).unwrap();
        // A power-of-two shard size keeps the weighted mean (n*w)/n exact
        // in floating point, so the degeneracy can be asserted bitwise.
        let keep: Vec<usize> = (0..32).collect();
        state.clients[0].shard.data = state.clients[0].shard.data.subset(&keep).unwrap();
        let client = state.clients[0].clone();
        let initial = state.global.clone();
        let train_seed = mix(&[stream::LOCAL_TRAIN, cfg.seed, 0]);
        let expected = local_update(
            &initial,
            &client.shard,
            cfg.local_epochs,
            cfg.lr,
            cfg.batch_size,
            train_seed,
        )
        .unwrap();
        run_round(&mut state, 0).unwrap();
        assert_eq!(state.global.max_abs_param_diff(&expected), 0.0);
    }

    #[test]
    fn two_identical_clients_aggregate_to_the_single_client_result() {
        let mut cfg = small_config();
        cfg.n_clients = 2;
        cfg.candidates.truncate(1);
        cfg.assignment = "fixed:0".into();
        let mut state = setup(&cfg).unwrap();
        // Give both clients the same shard (ids differ, data identical).
        let mut copy = state.clients[0].shard.clone();
        copy.client_id = 1;
        state.clients[1].shard = copy;
        state.clients[1].arch = state.clients[0].arch.clone();

        let initial = state.global.clone();
        let train_seed = mix(&[stream::LOCAL_TRAIN, cfg.seed, 0]);
        let sub = extract_submodel(&initial, &state.clients[0].arch).unwrap();
        let solo = local_update(
            &sub,
            &state.clients[0].shard,
            cfg.local_epochs,
            cfg.lr,
            cfg.batch_size,
            train_seed,
        )
        .unwrap();
        run_round(&mut state, 0).unwrap();
        // Identical inputs mean identical updates; their scaled weighted
        // mean lands on the update itself wherever the clients trained.
        for layer in &solo.layers {
            let g = state.global.layer(layer.key()).unwrap();
            let gslice = g
                .weight
                .slice2d(layer.weight.shape()[0], layer.weight.shape()[1])
                .unwrap();
            assert!(gslice.max_abs_diff(&layer.weight) < 1e-9);
        }
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let cfg = small_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.metrics_csv, b.metrics_csv);
        assert_eq!(
            a.final_global.max_abs_param_diff(&b.final_global),
            0.0
        );
        assert_eq!(a.metrics.len(), 2);
        assert!(a.metrics_csv.starts_with(METRICS_HEADER));
        // Different seeds steer the run elsewhere.
        let mut other = cfg.clone();
        other.seed = 12;
        let c = run_experiment(&other).unwrap();
        assert_ne!(a.metrics_csv, c.metrics_csv);
    }

    #[test]
    fn zero_rounds_reports_only_the_initial_evaluation() {
        let mut cfg = small_config();
        cfg.rounds = 0;
        let report = run_experiment(&cfg).unwrap();
        assert!(report.metrics.is_empty());
        assert_eq!(report.metrics_csv, format!("{METRICS_HEADER}\n"));
        assert!(report.initial_global_acc >= 0.0);
        assert_eq!(report.final_global_acc(), report.initial_global_acc);
    }

    #[test]
    fn output_files_land_in_the_requested_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.rounds = 1;
        cfg.save_snapshots = true;
        cfg.out_dir = Some(dir.path().join("run"));
        let report = run_experiment(&cfg).unwrap();
        let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
        assert_eq!(metrics, report.metrics_csv);
        let final_model = checkpoint::load(&dir.path().join("run/global.ckpt")).unwrap();
        assert_eq!(
            final_model.max_abs_param_diff(&report.final_global),
            0.0
        );
        assert!(dir.path().join("run/snapshots/round_0000.ckpt").exists());
    }

    #[test]
    fn training_improves_over_the_initial_model() {
        let mut cfg = small_config();
        cfg.rounds = 6;
        cfg.local_epochs = 2;
        let report = run_experiment(&cfg).unwrap();
        assert!(
            report.final_global_acc() > report.initial_global_acc + 0.1,
            "initial {} final {}",
            report.initial_global_acc,
            report.final_global_acc()
        );
        // Every round trained every client and covered the whole grid.
        for m in &report.metrics {
            assert_eq!(m.participants.len(), 4);
            assert!(m.gamma_complete);
            assert!(m.train_loss_mean.is_finite());
        }
    }

    #[test]
    fn round_errors_carry_round_context() {
        let mut cfg = small_config();
        cfg.rounds = 1;
        cfg.lr = 1e6; // diverges instantly
        let err = run_experiment(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("round 0:"), "{msg}");
    }
}

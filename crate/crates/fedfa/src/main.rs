//! Thin command-line front end: `run` executes an experiment config,
//! `analyze` produces weight-space reports from checkpoints, and `oracle`
//! prints brute-force reference values for spot-checking the fast paths.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use fedfa::analysis;
use fedfa::checkpoint;
use fedfa::config::ExperimentConfig;
use fedfa::experiment::run_experiment;
use fedfa::model::Model;
use fedfa::oracles;
use fedfa::seed::{rng_from, stream};
use fedfa::tensor::Tensor;

#[derive(Parser)]
#[command(name = "fedfa", version, about = "Deterministic federated learning simulator for heterogeneous residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment from a JSON config file.
    Run {
        /// Path to the experiment config (JSON, strict keys).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the aggregator (fedfa, fedfa_depth_only,
        /// fedfa_width_only, heterofl, flexifed, nefl, fedavg).
        #[arg(long)]
        aggregator: Option<String>,
        /// Worker threads for local updates; results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Produce a CSV report from saved checkpoints.
    Analyze {
        /// Checkpoint to analyze.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report kind: similarity, scale, or variance.
        #[arg(long)]
        report: String,
        /// Smaller reference model for the scale report; defaults to the
        /// checkpoint itself (all distances zero).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Tag recorded in similarity rows.
        #[arg(long, default_value = "final")]
        epoch_tag: String,
        /// Directory of per-round snapshots for the variance report;
        /// defaults to the single checkpoint.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print brute-force oracle values for a named case.
    Oracle {
        /// Case name; use "list" to see what is available.
        #[arg(long)]
        case: String,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            aggregator,
            threads,
        } => cmd_run(&config, out, seed, aggregator, threads),
        Command::Analyze {
            checkpoint,
            report,
            baseline,
            epoch_tag,
            snapshots,
            out,
        } => cmd_analyze(&checkpoint, &report, baseline, &epoch_tag, snapshots, out),
        Command::Oracle { case } => cmd_oracle(&case),
    }
}

fn cmd_run(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    aggregator: Option<String>,
    threads: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)
        .with_context(|| format!("loading config {}", config_path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = aggregator {
        cfg.aggregator = a;
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o);
    }
    cfg.validate()?;

    let report = match threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .context("building worker pool")?;
            pool.install(|| run_experiment(&cfg))?
        }
        None => run_experiment(&cfg)?,
    };

    println!("aggregator: {}", cfg.aggregator);
    println!("initial global accuracy: {:.4}", report.initial_global_acc);
    if let Some(last) = report.metrics.last() {
        println!("final global accuracy: {:.4}", last.global_acc);
        println!("final mean local accuracy: {:.4}", last.local_acc_mean);
    }
    if let Some(dir) = &cfg.out_dir {
        println!("wrote {}", dir.join("metrics.csv").display());
        println!("wrote {}", dir.join("global.ckpt").display());
    }
    Ok(())
}

fn emit(out: Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Fixed probe batch for variance reports: seeded standard normal inputs
/// matching the model's input width.
fn probe_inputs(model: &Model) -> anyhow::Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let dim = model.arch.input_dim;
    let n = 64usize;
    let mut rng = rng_from(&[stream::DATA_TEST, 0]);
    let data: Vec<f64> = (0..n * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(Tensor::new(vec![n, dim], data)?)
}

fn cmd_analyze(
    checkpoint_path: &Path,
    report: &str,
    baseline: Option<PathBuf>,
    epoch_tag: &str,
    snapshots: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let model = checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    match report {
        "similarity" => {
            let rows = analysis::section_similarity_table(&model, epoch_tag)?;
            let mut buf = Vec::new();
            analysis::write_similarity_csv(&mut buf, &rows)?;
            emit(out, &String::from_utf8(buf).expect("csv is utf-8"))
        }
        "scale" => {
            let base = match baseline {
                Some(p) => checkpoint::load(&p)
                    .with_context(|| format!("loading baseline {}", p.display()))?,
                None => model.clone(),
            };
            let rows = analysis::scale_metrics(&base, &model)?;
            let mut buf = Vec::new();
            analysis::write_scale_csv(&mut buf, &rows)?;
            emit(out, &String::from_utf8(buf).expect("csv is utf-8"))
        }
        "variance" => {
            let mut models = Vec::new();
            if let Some(dir) = snapshots {
                let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
                    .with_context(|| format!("reading snapshots in {}", dir.display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
                    .collect();
                paths.sort();
                if paths.is_empty() {
                    bail!("no .ckpt files in {}", dir.display());
                }
                for p in paths {
                    models.push(checkpoint::load(&p)?);
                }
            } else {
                models.push(model.clone());
            }
            let inputs = probe_inputs(&models[0])?;
            let (series, rate) = analysis::logit_variance_rate(&models, &inputs)?;
            let mut buf = Vec::new();
            analysis::write_variance_csv(&mut buf, &series, rate)?;
            emit(out, &String::from_utf8(buf).expect("csv is utf-8"))
        }
        other => bail!("unknown report '{other}' (expected similarity, scale, or variance)"),
    }
}

const ORACLE_CASES: &[&str] = &[
    "percentile",
    "norm",
    "alpha",
    "accumulation",
    "top-rows",
    "pcc",
    "macs",
    "bn",
];

fn cmd_oracle(case: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match case {
        "list" => {
            for c in ORACLE_CASES {
                writeln!(out, "{c}")?;
            }
        }
        "percentile" => {
            let values = vec![1.0, -2.0, 3.0, -4.0, 5.0, 6.0, -7.0, 8.0, 9.0, 100.0];
            writeln!(out, "input: {values:?}")?;
            let kept = oracles::percentile_filter_oracle(&values, 0.95);
            writeln!(out, "kept below the 0.95 cutoff: {kept:?}")?;
        }
        "norm" => {
            // Euclidean norms of classic integer triples.
            for v in [vec![3.0, 4.0], vec![5.0, 12.0]] {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                writeln!(out, "l2{v:?} = {n}")?;
            }
        }
        "alpha" => {
            for (mean, norm) in [(2.5, 1.0), (2.5, 4.0), (3.0, 0.0)] {
                let alpha = if norm <= 0.0 { 1.0 } else { mean / norm };
                writeln!(out, "mean {mean} / norm {norm} -> alpha {alpha}")?;
            }
        }
        "accumulation" => {
            let prev = Tensor::filled(vec![2, 2], 9.0)?;
            let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
            let b = Tensor::new(vec![1, 2], vec![10.0, 20.0])?;
            let got = oracles::accumulation_oracle(
                2,
                2,
                &prev,
                &[(a.clone(), 1.0, 1.0), (b.clone(), 3.0, 2.0)],
            );
            writeln!(out, "prev: {:?}", prev.data())?;
            writeln!(out, "update a (n=1, alpha=1): {:?}", a.data())?;
            writeln!(out, "update b (n=3, alpha=2, top row only): {:?}", b.data())?;
            writeln!(out, "aggregated: {:?}", got.data())?;
        }
        "top-rows" => {
            let w = Tensor::new(vec![3, 2], vec![1.0, 1.0, 5.0, 5.0, 2.0, 2.0])?;
            writeln!(out, "row norms: {:?}", [2f64.sqrt(), 50f64.sqrt(), 8f64.sqrt()])?;
            writeln!(out, "top 4 rows with cycling: {:?}", oracles::top_rows_oracle(&w, 4))?;
        }
        "pcc" => {
            let a = [1.0, 2.0, 3.0];
            let b = [1.0, 2.0, 4.0];
            writeln!(out, "pcc({a:?}, {b:?}) = {}", oracles::pearson_reference(&a, &b))?;
        }
        "macs" => {
            writeln!(
                out,
                "one [3x2] layer, 10 samples, forward+backward: {}",
                oracles::macs_oracle(&[(3, 2)], 10)
            )?;
        }
        "bn" => {
            for (alpha, eps) in [(2.0, 0.0), (20.0, 1e-5)] {
                writeln!(
                    out,
                    "deviation(y=[-1,1], alpha={alpha}, eps={eps}) = {:e}",
                    oracles::bn_deviation_oracle(&[-1.0, 1.0], alpha, eps)
                )?;
            }
        }
        other => bail!(
            "unknown case '{other}'; available: {}",
            ORACLE_CASES.join(", ")
        ),
    }
    Ok(())
}

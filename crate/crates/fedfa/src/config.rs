//! Experiment configuration: JSON schema, validation, and derived values.
//!
//! Configs are strict: unknown keys are rejected so a typo cannot silently
//! fall back to a default. See `examples/configs/` in the crate for
//! complete files.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversary::AttackConfig;
use crate::aggregation::{AggOptions, Aggregator};
use crate::arch::ArchSpec;
use crate::error::{Error, Result};

/// One architecture clients may be assigned. `sections` lists
/// `[depth, width]` per section; every candidate in a config must have the
/// same number of sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateArch {
    pub name: String,
    pub sections: Vec<[usize; 2]>,
}

impl CandidateArch {
    pub fn to_arch(&self, input_dim: usize, output_dim: usize) -> Result<ArchSpec> {
        ArchSpec::new(
            input_dim,
            output_dim,
            self.sections.iter().map(|s| (s[0], s[1])).collect(),
            &self.name,
        )
    }
}

/// Synthetic dataset settings: Gaussian blobs, one center per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    /// "iid" or "noniid".
    #[serde(default = "default_partition")]
    pub partition: String,
    /// Fraction of classes each shard sees under "noniid".
    #[serde(default = "default_class_fraction")]
    pub class_fraction: f64,
}

fn default_partition() -> String {
    "iid".to_string()
}

fn default_class_fraction() -> f64 {
    0.2
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::BadConfig(format!(
                "classification needs at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::BadConfig(
                "dataset dim and per-class sample counts must be positive".into(),
            ));
        }
        if !self.spread.is_finite() || self.spread < 0.0 {
            return Err(Error::BadConfig(format!(
                "spread must be finite and >= 0, got {}",
                self.spread
            )));
        }
        match self.partition.as_str() {
            "iid" => {}
            "noniid" => {
                if !(self.class_fraction > 0.0 && self.class_fraction <= 1.0) {
                    return Err(Error::BadConfig(format!(
                        "class_fraction must lie in (0, 1], got {}",
                        self.class_fraction
                    )));
                }
            }
            other => {
                return Err(Error::BadConfig(format!(
                    "unknown partition '{other}' (expected \"iid\" or \"noniid\")"
                )));
            }
        }
        Ok(())
    }
}

/// How clients are mapped onto the candidate grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentPolicy {
    /// The first `floor(n/2)` clients get the smallest candidate by
    /// parameter count; the rest draw a seeded uniform choice. Selected by
    /// the config string "paper_default".
    HalfMinimal,
    /// Every client draws a seeded uniform choice ("uniform_random").
    UniformRandom,
    /// Every client gets candidate `i` ("fixed:<i>").
    Fixed(usize),
}

impl FromStr for AssignmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "paper_default" {
            return Ok(AssignmentPolicy::HalfMinimal);
        }
        if s == "uniform_random" {
            return Ok(AssignmentPolicy::UniformRandom);
        }
        if let Some(idx) = s.strip_prefix("fixed:") {
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::BadConfig(format!("bad fixed assignment index in '{s}'")))?;
            return Ok(AssignmentPolicy::Fixed(idx));
        }
        Err(Error::BadConfig(format!(
            "unknown assignment policy '{s}' (expected \"paper_default\", \"uniform_random\" or \"fixed:<index>\")"
        )))
    }
}

/// Top-level experiment description, loaded from a JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Federated rounds. Zero runs only the initial evaluation.
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_clients: usize,
    /// Fraction of clients selected each round, in (0, 1].
    pub participation: f64,
    pub aggregator: String,
    pub candidates: Vec<CandidateArch>,
    #[serde(default = "default_assignment")]
    pub assignment: String,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub aggregation_options: AggOptions,
    /// Keep a global-model snapshot per round (for variance reports).
    #[serde(default)]
    pub save_snapshots: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_assignment() -> String {
    "paper_default".to_string()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Number of clients selected per round: `round(participation * n)`.
    pub fn m_selected(&self) -> usize {
        (self.participation * self.n_clients as f64).round() as usize
    }

    pub fn parsed_aggregator(&self) -> Result<Aggregator> {
        self.aggregator.parse()
    }

    pub fn assignment_policy(&self) -> Result<AssignmentPolicy> {
        self.assignment.parse()
    }

    /// Candidate grid as validated architectures over this dataset's
    /// input dimension and class count.
    pub fn arch_specs(&self) -> Result<Vec<ArchSpec>> {
        self.candidates
            .iter()
            .map(|c| c.to_arch(self.dataset.dim, self.dataset.n_classes))
            .collect()
    }

    /// The server-side architecture: maximum depth and width per section
    /// across the candidate grid.
    pub fn global_arch(&self) -> Result<ArchSpec> {
        ArchSpec::global_over(&self.arch_specs()?, "global")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::BadConfig("n_clients must be positive".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::BadConfig(format!(
                "participation must lie in (0, 1], got {}",
                self.participation
            )));
        }
        if self.m_selected() == 0 {
            return Err(Error::BadConfig(format!(
                "participation {} of {} clients selects nobody",
                self.participation, self.n_clients
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::BadConfig("local_epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::BadLr(self.lr));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be positive".into()));
        }
        if self.candidates.is_empty() {
            return Err(Error::BadConfig("candidate grid is empty".into()));
        }
        self.dataset.validate()?;
        let specs = self.arch_specs()?;
        ArchSpec::global_over(&specs, "global")?;
        self.parsed_aggregator()?;
        let policy = self.assignment_policy()?;
        if let AssignmentPolicy::Fixed(i) = policy {
            if i >= self.candidates.len() {
                return Err(Error::BadConfig(format!(
                    "fixed assignment index {i} out of range for {} candidates",
                    self.candidates.len()
                )));
            }
        }
        if let Some(attack) = &self.attack {
            attack.validate()?;
            if attack.target_class >= self.dataset.n_classes {
                return Err(Error::BadConfig(format!(
                    "attack target class {} out of range for {} classes",
                    attack.target_class, self.dataset.n_classes
                )));
            }
        }
        if self.parsed_aggregator()? == Aggregator::FedAvg {
            let first = &specs[0];
            if !specs.iter().all(|a| a.same_structure(first)) {
                return Err(Error::BadArch(
                    "fedavg requires all candidates to share one structure".into(),
                ));
            }
        }
        Ok(())
    }
}

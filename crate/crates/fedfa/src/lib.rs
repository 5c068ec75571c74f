//! Deterministic desk-scale simulator for federated learning across clients
//! with heterogeneous residual-network architectures.
//!
//! The crate revolves around one aggregation protocol, `fedfa`, which
//! standardizes client models of different depths by grafting copies of each
//! section's last residual block, rescales every contribution by a
//! sub-95th-percentile layer-norm factor, and slice-accumulates weights of
//! different widths into the global model. Alongside it live the partial
//! aggregation baselines (`heterofl`, `flexifed`, `nefl`, `fedavg`), additive
//! backdoor and label-shuffle adversaries, synthetic Gaussian-blob data with
//! IID and pathological non-IID partitions, and the weight-space analyses
//! (layer similarity, scale drift, logit-variance growth, normalization
//! scale checks, multiply-accumulate accounting).
//!
//! Everything is seeded: the same configuration produces bit-identical
//! metrics regardless of thread count. Start with the runnable programs in
//! `examples/`, each of which exercises a single capability end to end, or
//! with the thin `fedfa` binary (`run`, `analyze`, `oracle`).

pub mod adversary;
pub mod aggregation;
pub mod analysis;
pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grafting;
pub mod model;
pub mod oracles;
pub mod seed;
pub mod tensor;
pub mod training;

pub use arch::ArchSpec;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;

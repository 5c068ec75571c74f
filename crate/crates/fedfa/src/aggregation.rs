//! Server-side aggregation of heterogeneous client updates.
//!
//! All aggregators share one mechanism: every client contribution is
//! weighted by its sample count and accumulated position by position into
//! the global parameter grid, and positions nobody reached keep their
//! previous global value. They differ in how contributions are standardized
//! first:
//!
//! * `fedfa` (and its alias `fedfa_depth_only`) depth-grafts each update to
//!   the global block counts, then rescales every layer by the ratio of the
//!   participants' mean robust layer norm to the client's own, so that wide
//!   and narrow models meet at a comparable parameter magnitude.
//! * `fedfa_width_only` instead width-grafts each update to the global
//!   widths and applies the same rescaling across the depths the client
//!   actually has.
//! * `heterofl`, `flexifed` and `nefl` accumulate raw updates over exactly
//!   the region each client trained; on this server they are the same
//!   procedure and differ only in the client populations they are normally
//!   paired with.
//! * `fedavg` demands identical architectures and reduces to the classic
//!   sample-weighted mean.
//!
//! The robust norm of a layer pools its weights (and optionally biases),
//! drops the values at or above the 95th percentile of absolute magnitude,
//! and takes the Euclidean norm of the rest, which keeps a handful of
//! outlier parameters from dominating the scale estimate.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grafting::{filter_graft, layer_graft, FilterGraftMode};
use crate::model::{Layer, LayerKey, Model};
use crate::tensor::Tensor;

/// Fraction of the absolute-magnitude distribution kept below the cutoff
/// when computing robust layer norms.
pub const NORM_PERCENTILE: f64 = 0.95;

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Sample count of the client's shard; the accumulation weight.
    pub n_samples: usize,
    /// The locally trained submodel, in the client's own architecture.
    pub model: Model,
}

/// Aggregation knobs shared by every aggregator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggOptions {
    /// Include biases (and normalization shifts) in the robust-norm pool.
    #[serde(default = "default_true")]
    pub include_bias_in_pool: bool,
    /// Consumer handling when `fedfa_width_only` width-grafts updates.
    #[serde(default)]
    pub filter_graft_mode: FilterGraftMode,
}

fn default_true() -> bool {
    true
}

impl Default for AggOptions {
    fn default() -> Self {
        AggOptions {
            include_bias_in_pool: true,
            filter_graft_mode: FilterGraftMode::FunctionPreserving,
        }
    }
}

/// Robust norm of one layer: pool the weights (optionally the bias), drop
/// the top tail by absolute magnitude, take the Euclidean norm of the rest.
pub fn sub95_norm(layer: &Layer, include_bias: bool) -> Result<f64> {
    let mut pool = layer.weight.data().to_vec();
    if include_bias {
        pool.extend_from_slice(layer.bias.data());
    }
    Tensor::vector(pool)?
        .percentile_filter(NORM_PERCENTILE)?
        .l2_norm()
}

/// Scale factor for one client layer: participants' mean robust norm over
/// the client's own. A zero client norm falls back to no rescaling, so an
/// all-zero layer contributes verbatim instead of dividing by zero.
pub fn scaling_factor(mean_norm: f64, client_norm: f64) -> f64 {
    if client_norm > 0.0 {
        mean_norm / client_norm
    } else {
        1.0
    }
}

/// Per-layer scaling detail for one round.
#[derive(Debug, Clone)]
pub struct LayerScaleEntry {
    pub key: LayerKey,
    /// Mean robust norm over the clients holding this layer.
    pub mean_norm: f64,
    /// `(client_id, alpha)` in ascending client order.
    pub scales: Vec<(usize, f64)>,
}

/// Fraction of a global layer's positions that received at least one
/// contribution.
#[derive(Debug, Clone)]
pub struct CoverageEntry {
    pub key: LayerKey,
    pub covered: f64,
}

/// Per-position accumulated sample weight for one global layer: entry
/// `[i][j]` of `weight` (and `[i]` of `bias`) is the total `n_samples`
/// of the clients whose contribution reached that position.
#[derive(Debug, Clone)]
pub struct GammaEntry {
    pub key: LayerKey,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AggregationReport {
    /// Participating client ids, ascending.
    pub participants: Vec<usize>,
    /// Empty for the unscaled aggregators.
    pub layer_scales: Vec<LayerScaleEntry>,
    pub coverage: Vec<CoverageEntry>,
    pub gamma: Vec<GammaEntry>,
    /// True when every global weight and bias position was reached.
    pub gamma_complete: bool,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

/// A standardized contribution ready for accumulation.
struct Prepared {
    client_id: usize,
    n: f64,
    model: Model,
    /// Per-layer scale; all ones for unscaled aggregators.
    alphas: BTreeMap<LayerKey, f64>,
}

fn check_updates(prev: &Model, updates: &[ClientUpdate]) -> Result<Vec<usize>> {
    if updates.is_empty() {
        return Err(Error::NoUpdates);
    }
    for u in updates {
        u.model.validate()?;
        if !u.model.arch.fits_within(&prev.arch) {
            return Err(Error::ArchExceedsGlobal(format!(
                "client {} submitted '{}', which does not fit within the global '{}'",
                u.client_id, u.model.arch.seed_tag, prev.arch.seed_tag
            )));
        }
        if u.n_samples == 0 {
            return Err(Error::EmptyBatch(format!(
                "client {} reported zero samples",
                u.client_id
            )));
        }
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| (updates[i].client_id, i));
    Ok(order)
}

/// Sample-weighted accumulation of prepared contributions into the global
/// grid. Every position a contributor reaches averages `n * alpha * value`
/// against the total weight `n` that reached it; untouched positions carry
/// the previous global value. Fixed normalization statistics are carried
/// over unconditionally.
fn accumulate(
    prev: &Model,
    prepared: &[Prepared],
) -> Result<(Model, Vec<CoverageEntry>, Vec<GammaEntry>, bool)> {
    let mut out = prev.clone();
    let mut coverage = Vec::new();
    let mut gamma = Vec::new();
    let mut complete = true;
    for (idx, glayer) in prev.layers.iter().enumerate() {
        let key = glayer.key();
        let (rows, cols) = (glayer.weight.shape()[0], glayer.weight.shape()[1]);
        let blen = glayer.bias.len();
        let mut wnum = vec![0.0; rows * cols];
        let mut wden = vec![0.0; rows * cols];
        let mut bnum = vec![0.0; blen];
        let mut bden = vec![0.0; blen];
        for p in prepared {
            let Some(cl) = p.model.layer(key) else { continue };
            let alpha = *p.alphas.get(&key).unwrap_or(&1.0);
            let (crows, ccols) = (cl.weight.shape()[0], cl.weight.shape()[1]);
            for i in 0..crows {
                for j in 0..ccols {
                    wnum[i * cols + j] += p.n * alpha * cl.weight.get2(i, j);
                    wden[i * cols + j] += p.n;
                }
            }
            for (i, b) in cl.bias.data().iter().enumerate() {
                bnum[i] += p.n * alpha * b;
                bden[i] += p.n;
            }
        }
        let mut touched = 0usize;
        {
            let w = out.layers[idx].weight.data_mut();
            for pos in 0..rows * cols {
                if wden[pos] > 0.0 {
                    w[pos] = wnum[pos] / wden[pos];
                    touched += 1;
                }
            }
        }
        {
            let b = out.layers[idx].bias.data_mut();
            for pos in 0..blen {
                if bden[pos] > 0.0 {
                    b[pos] = bnum[pos] / bden[pos];
                    touched += 1;
                }
            }
        }
        let total = rows * cols + blen;
        let covered = touched as f64 / total as f64;
        if covered < 1.0 {
            complete = false;
        }
        coverage.push(CoverageEntry { key, covered });
        gamma.push(GammaEntry {
            key,
            weight: Tensor::new(vec![rows, cols], wden)?,
            bias: bden,
        });
    }
    out.validate()?;
    Ok((out, coverage, gamma, complete))
}

/// Computes per-client, per-layer scale factors over the standardized
/// models. The mean norm of a layer runs over the clients that hold it.
fn compute_scales(
    prev: &Model,
    contributions: &[(usize, &Model)],
    include_bias: bool,
) -> Result<(Vec<BTreeMap<LayerKey, f64>>, Vec<LayerScaleEntry>)> {
    let mut alphas: Vec<BTreeMap<LayerKey, f64>> =
        vec![BTreeMap::new(); contributions.len()];
    let mut entries = Vec::new();
    for glayer in &prev.layers {
        let key = glayer.key();
        let mut norms = Vec::new();
        for (slot, (cid, model)) in contributions.iter().enumerate() {
            if let Some(cl) = model.layer(key) {
                norms.push((slot, *cid, sub95_norm(cl, include_bias)?));
            }
        }
        if norms.is_empty() {
            continue;
        }
        let mean = norms.iter().map(|(_, _, n)| n).sum::<f64>() / norms.len() as f64;
        let mut scales = Vec::with_capacity(norms.len());
        for (slot, cid, norm) in norms {
            let alpha = scaling_factor(mean, norm);
            alphas[slot].insert(key, alpha);
            scales.push((cid, alpha));
        }
        entries.push(LayerScaleEntry {
            key,
            mean_norm: mean,
            scales,
        });
    }
    Ok((alphas, entries))
}

fn alpha_range(entries: &[LayerScaleEntry]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for e in entries {
        for (_, a) in &e.scales {
            lo = lo.min(*a);
            hi = hi.max(*a);
        }
    }
    if lo > hi {
        (1.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn run_scaled(
    prev: &Model,
    updates: &[ClientUpdate],
    options: &AggOptions,
    standardize: impl Fn(&Model) -> Result<Model>,
) -> Result<(Model, AggregationReport)> {
    let order = check_updates(prev, updates)?;
    let mut standardized: Vec<(usize, f64, Model)> = Vec::with_capacity(order.len());
    for &i in &order {
        let u = &updates[i];
        standardized.push((u.client_id, u.n_samples as f64, standardize(&u.model)?));
    }
    let views: Vec<(usize, &Model)> = standardized.iter().map(|(c, _, m)| (*c, m)).collect();
    let (alpha_maps, layer_scales) =
        compute_scales(prev, &views, options.include_bias_in_pool)?;
    let prepared: Vec<Prepared> = standardized
        .into_iter()
        .zip(alpha_maps)
        .map(|((client_id, n, model), alphas)| Prepared {
            client_id,
            n,
            model,
            alphas,
        })
        .collect();
    let (global, coverage, gamma, gamma_complete) = accumulate(prev, &prepared)?;
    let (alpha_min, alpha_max) = alpha_range(&layer_scales);
    let report = AggregationReport {
        participants: prepared.iter().map(|p| p.client_id).collect(),
        layer_scales,
        coverage,
        gamma,
        gamma_complete,
        alpha_min,
        alpha_max,
    };
    Ok((global, report))
}

/// Depth-grafting scalable aggregation: updates are depth-grafted to the
/// global block counts, rescaled per layer by mean-over-own robust norm and
/// slice-accumulated across their native widths.
pub fn aggregate_fedfa(
    prev: &Model,
    updates: &[ClientUpdate],
    options: &AggOptions,
) -> Result<(Model, AggregationReport)> {
    let depths: Vec<usize> = prev.arch.sections.iter().map(|s| s.depth).collect();
    run_scaled(prev, updates, options, |m| layer_graft(m, &depths))
}

/// Width-grafting variant: updates are width-grafted to the global widths
/// and rescaled, while contributing only across their native depths.
pub fn aggregate_fedfa_width_only(
    prev: &Model,
    updates: &[ClientUpdate],
    options: &AggOptions,
) -> Result<(Model, AggregationReport)> {
    let widths: Vec<usize> = prev.arch.sections.iter().map(|s| s.width).collect();
    run_scaled(prev, updates, options, |m| {
        filter_graft(m, &widths, options.filter_graft_mode)
    })
}

/// Raw partial accumulation: every update contributes verbatim over exactly
/// the region it trained. Serves `heterofl`, `flexifed` and `nefl`.
pub fn aggregate_partial(
    prev: &Model,
    updates: &[ClientUpdate],
) -> Result<(Model, AggregationReport)> {
    let order = check_updates(prev, updates)?;
    let prepared: Vec<Prepared> = order
        .iter()
        .map(|&i| Prepared {
            client_id: updates[i].client_id,
            n: updates[i].n_samples as f64,
            model: updates[i].model.clone(),
            alphas: BTreeMap::new(),
        })
        .collect();
    let (global, coverage, gamma, gamma_complete) = accumulate(prev, &prepared)?;
    let report = AggregationReport {
        participants: prepared.iter().map(|p| p.client_id).collect(),
        layer_scales: Vec::new(),
        coverage,
        gamma,
        gamma_complete,
        alpha_min: 1.0,
        alpha_max: 1.0,
    };
    Ok((global, report))
}

/// Classic sample-weighted mean; rejects heterogeneous architectures.
pub fn aggregate_fedavg(
    prev: &Model,
    updates: &[ClientUpdate],
) -> Result<(Model, AggregationReport)> {
    for u in updates {
        if !u.model.arch.same_structure(&prev.arch) {
            return Err(Error::BadArch(format!(
                "fedavg needs every client on the global architecture, client {} uses '{}'",
                u.client_id, u.model.arch.seed_tag
            )));
        }
    }
    aggregate_partial(prev, updates)
}

/// The aggregation protocols selectable from a run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    FedFa,
    FedFaDepthOnly,
    FedFaWidthOnly,
    HeteroFl,
    FlexiFed,
    NeFl,
    FedAvg,
}

impl Aggregator {
    pub const NAMES: [&'static str; 7] = [
        "fedfa",
        "fedfa_depth_only",
        "fedfa_width_only",
        "heterofl",
        "flexifed",
        "nefl",
        "fedavg",
    ];

    pub fn aggregate(
        &self,
        prev: &Model,
        updates: &[ClientUpdate],
        options: &AggOptions,
    ) -> Result<(Model, AggregationReport)> {
        match self {
            Aggregator::FedFa | Aggregator::FedFaDepthOnly => {
                aggregate_fedfa(prev, updates, options)
            }
            Aggregator::FedFaWidthOnly => aggregate_fedfa_width_only(prev, updates, options),
            Aggregator::HeteroFl | Aggregator::FlexiFed | Aggregator::NeFl => {
                aggregate_partial(prev, updates)
            }
            Aggregator::FedAvg => aggregate_fedavg(prev, updates),
        }
    }

    /// Whether the aggregator rescales contributions by robust layer norms.
    pub fn is_scaled(&self) -> bool {
        matches!(
            self,
            Aggregator::FedFa | Aggregator::FedFaDepthOnly | Aggregator::FedFaWidthOnly
        )
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedfa" => Ok(Aggregator::FedFa),
            "fedfa_depth_only" => Ok(Aggregator::FedFaDepthOnly),
            "fedfa_width_only" => Ok(Aggregator::FedFaWidthOnly),
            "heterofl" => Ok(Aggregator::HeteroFl),
            "flexifed" => Ok(Aggregator::FlexiFed),
            "nefl" => Ok(Aggregator::NeFl),
            "fedavg" => Ok(Aggregator::FedAvg),
            other => Err(Error::BadConfig(format!(
                "unknown aggregator '{other}', expected one of {}",
                Aggregator::NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Aggregator::FedFa => "fedfa",
            Aggregator::FedFaDepthOnly => "fedfa_depth_only",
            Aggregator::FedFaWidthOnly => "fedfa_width_only",
            Aggregator::HeteroFl => "heterofl",
            Aggregator::FlexiFed => "flexifed",
            Aggregator::NeFl => "nefl",
            Aggregator::FedAvg => "fedavg",
        };
        f.write_str(name)
    }
}

//! Residual multilayer perceptrons built from an [`ArchSpec`].
//!
//! Layer order is fixed: for each section an entry layer (previous width to
//! section width), a static normalization layer, then `depth` residual
//! blocks; one output layer closes the network. Residual blocks keep their
//! input and output width equal, which is what lets depth grafting append
//! parameter-identical block copies and lets width slicing stay consistent
//! with the skip connections.

use std::fmt;

use rand::Rng;

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::seed::{rng_from, stream};
use crate::tensor::Tensor;

/// Fixed statistics used by static normalization layers unless a caller
/// overrides them.
pub const DEFAULT_NORM_MEAN: f64 = 0.0;
pub const DEFAULT_NORM_STD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    EntryLinear,
    BlockLinear,
    StaticNorm,
    OutputLinear,
}

/// Position of a layer within the shared section structure. Models built
/// from different candidates align layer-for-layer through these keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKey {
    Entry(usize),
    Norm(usize),
    /// Section index and zero-based block index within the section.
    Block(usize, usize),
    Output,
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKey::Entry(s) => write!(f, "entry_{s}"),
            LayerKey::Norm(s) => write!(f, "norm_{s}"),
            LayerKey::Block(s, b) => write!(f, "block_{s}_{b}"),
            LayerKey::Output => write!(f, "output"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Section index; the output layer reports the last section.
    pub section: usize,
    /// Zero-based block index for block layers, 0 otherwise.
    pub block_index: usize,
    /// `[out, in]` dense weight. Normalization layers store their gain as an
    /// `[width, 1]` column so that width slicing is uniform across kinds.
    pub weight: Tensor,
    /// `[out]` bias (the shift term for normalization layers).
    pub bias: Tensor,
    /// Fixed statistics, present only on normalization layers.
    pub norm_mean: Option<Tensor>,
    pub norm_std: Option<Tensor>,
}

impl Layer {
    pub fn key(&self) -> LayerKey {
        match self.kind {
            LayerKind::EntryLinear => LayerKey::Entry(self.section),
            LayerKind::StaticNorm => LayerKey::Norm(self.section),
            LayerKind::BlockLinear => LayerKey::Block(self.section, self.block_index),
            LayerKind::OutputLinear => LayerKey::Output,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Shape blueprint for one layer, derived purely from an architecture. The
/// builder, the extractor and the checkpoint reader all walk the same list.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerTemplate {
    pub kind: LayerKind,
    pub section: usize,
    pub block_index: usize,
    pub weight_shape: (usize, usize),
    pub bias_len: usize,
    pub has_stats: bool,
}

pub(crate) fn layer_templates(arch: &ArchSpec) -> Vec<LayerTemplate> {
    let mut templates = Vec::new();
    for (s, sec) in arch.sections.iter().enumerate() {
        templates.push(LayerTemplate {
            kind: LayerKind::EntryLinear,
            section: s,
            block_index: 0,
            weight_shape: (sec.width, arch.width_before(s)),
            bias_len: sec.width,
            has_stats: false,
        });
        templates.push(LayerTemplate {
            kind: LayerKind::StaticNorm,
            section: s,
            block_index: 0,
            weight_shape: (sec.width, 1),
            bias_len: sec.width,
            has_stats: true,
        });
        for b in 0..sec.depth {
            templates.push(LayerTemplate {
                kind: LayerKind::BlockLinear,
                section: s,
                block_index: b,
                weight_shape: (sec.width, sec.width),
                bias_len: sec.width,
                has_stats: false,
            });
        }
    }
    templates.push(LayerTemplate {
        kind: LayerKind::OutputLinear,
        section: arch.sections.len().saturating_sub(1),
        block_index: 0,
        weight_shape: (arch.output_dim, arch.last_width()),
        bias_len: arch.output_dim,
        has_stats: false,
    });
    templates
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub layers: Vec<Layer>,
}

/// Builds a model with the default normalization statistics. Dense weights
/// are drawn uniformly from `(-1/sqrt(fan_in), 1/sqrt(fan_in))` in layer
/// order; biases start at zero; normalization gains start at one. Equal
/// `(arch, seed)` pairs produce bit-identical models.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<Model> {
    build_model_with_stats(arch, seed, DEFAULT_NORM_MEAN, DEFAULT_NORM_STD)
}

pub fn build_model_with_stats(
    arch: &ArchSpec,
    seed: u64,
    norm_mean: f64,
    norm_std: f64,
) -> Result<Model> {
    arch.validate()?;
    if !(norm_std > 0.0) || !norm_std.is_finite() || !norm_mean.is_finite() {
        return Err(Error::BadArch(format!(
            "normalization statistics must be finite with positive std, got mean {norm_mean} std {norm_std}"
        )));
    }
    let mut rng = rng_from(&[stream::GLOBAL_INIT, seed]);
    let mut layers = Vec::new();
    for t in layer_templates(arch) {
        let (out, inp) = t.weight_shape;
        let layer = match t.kind {
            LayerKind::StaticNorm => Layer {
                kind: t.kind,
                section: t.section,
                block_index: t.block_index,
                weight: Tensor::filled(vec![out, 1], 1.0)?,
                bias: Tensor::zeros(vec![out]),
                norm_mean: Some(Tensor::filled(vec![out], norm_mean)?),
                norm_std: Some(Tensor::filled(vec![out], norm_std)?),
            },
            _ => {
                let bound = 1.0 / (inp as f64).sqrt();
                let mut data = Vec::with_capacity(out * inp);
                for _ in 0..out * inp {
                    data.push(rng.gen_range(-bound..bound));
                }
                Layer {
                    kind: t.kind,
                    section: t.section,
                    block_index: t.block_index,
                    weight: Tensor::new(vec![out, inp], data)?,
                    bias: Tensor::zeros(vec![out]),
                    norm_mean: None,
                    norm_std: None,
                }
            }
        };
        layers.push(layer);
    }
    Ok(Model {
        arch: arch.clone(),
        layers,
    })
}

impl Model {
    pub fn layer(&self, key: LayerKey) -> Option<&Layer> {
        self.layers.iter().find(|l| l.key() == key)
    }

    pub fn layer_mut(&mut self, key: LayerKey) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.key() == key)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Largest absolute parameter difference against a model of identical
    /// structure (weights and biases; fixed statistics are excluded).
    pub fn max_abs_param_diff(&self, other: &Model) -> f64 {
        assert_eq!(self.layers.len(), other.layers.len(), "structure mismatch");
        let mut worst = 0.0f64;
        for (a, b) in self.layers.iter().zip(other.layers.iter()) {
            worst = worst.max(a.weight.max_abs_diff(&b.weight));
            worst = worst.max(a.bias.max_abs_diff(&b.bias));
        }
        worst
    }

    /// Checks layer shapes against the architecture and that every parameter
    /// is finite.
    pub fn validate(&self) -> Result<()> {
        let templates = layer_templates(&self.arch);
        if templates.len() != self.layers.len() {
            return Err(Error::ShapeError(format!(
                "model has {} layers, architecture wants {}",
                self.layers.len(),
                templates.len()
            )));
        }
        for (t, l) in templates.iter().zip(self.layers.iter()) {
            if t.kind != l.kind || t.section != l.section || t.block_index != l.block_index {
                return Err(Error::ShapeError(format!(
                    "layer order mismatch at section {} block {}",
                    t.section, t.block_index
                )));
            }
            if l.weight.shape() != [t.weight_shape.0, t.weight_shape.1]
                || l.bias.shape() != [t.bias_len]
            {
                return Err(Error::ShapeError(format!(
                    "layer shape mismatch at section {} block {}: weight {:?} bias {:?}",
                    t.section,
                    t.block_index,
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            if t.has_stats != (l.norm_mean.is_some() && l.norm_std.is_some()) {
                return Err(Error::ShapeError(format!(
                    "normalization statistics mismatch at section {}",
                    t.section
                )));
            }
            l.weight.validate_finite("model weight")?;
            l.bias.validate_finite("model bias")?;
            if let (Some(m), Some(s)) = (&l.norm_mean, &l.norm_std) {
                m.validate_finite("normalization mean")?;
                s.validate_finite("normalization std")?;
                if m.shape() != [t.bias_len] || s.shape() != [t.bias_len] {
                    return Err(Error::ShapeError(format!(
                        "normalization statistic shape mismatch at section {}",
                        t.section
                    )));
                }
            }
        }
        Ok(())
    }
}

/// First `k` entries of a rank-1 tensor.
fn head(t: &Tensor, k: usize) -> Result<Tensor> {
    if t.rank() != 1 || k > t.len() {
        return Err(Error::SliceBounds(format!(
            "head of {k} from a rank-{} tensor of {} elements",
            t.rank(),
            t.len()
        )));
    }
    Tensor::vector(t.data()[..k].to_vec())
}

/// Carves the submodel for `target` out of `source`: per section, blocks are
/// dropped from the end down to the target depth, then every weight matrix
/// is sliced to its target `[out, in]` and every per-feature vector to the
/// target width. The reverse of depth grafting.
pub fn extract_submodel(source: &Model, target: &ArchSpec) -> Result<Model> {
    target.validate()?;
    if !target.fits_within(&source.arch) {
        return Err(Error::NotASubmodel(format!(
            "target '{}' does not fit within '{}'",
            target.seed_tag, source.arch.seed_tag
        )));
    }
    let mut layers = Vec::new();
    for t in layer_templates(target) {
        let key = LayerKey::from_template(&t);
        let src = source
            .layer(key)
            .ok_or_else(|| Error::NotASubmodel(format!("source lacks layer {key:?}")))?;
        let (out, inp) = t.weight_shape;
        let layer = Layer {
            kind: t.kind,
            section: t.section,
            block_index: t.block_index,
            weight: src.weight.slice2d(out, inp)?,
            bias: head(&src.bias, t.bias_len)?,
            norm_mean: match &src.norm_mean {
                Some(m) => Some(head(m, t.bias_len)?),
                None => None,
            },
            norm_std: match &src.norm_std {
                Some(s) => Some(head(s, t.bias_len)?),
                None => None,
            },
        };
        layers.push(layer);
    }
    Ok(Model {
        arch: target.clone(),
        layers,
    })
}

impl LayerKey {
    pub(crate) fn from_template(t: &LayerTemplate) -> LayerKey {
        match t.kind {
            LayerKind::EntryLinear => LayerKey::Entry(t.section),
            LayerKind::StaticNorm => LayerKey::Norm(t.section),
            LayerKind::BlockLinear => LayerKey::Block(t.section, t.block_index),
            LayerKind::OutputLinear => LayerKey::Output,
        }
    }
}

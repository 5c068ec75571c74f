//! Architecture descriptions. A network is a chain of sections; each section
//! has a depth (number of residual blocks) and a width (feature dimension).
//! Architectures in one experiment always share the section count and differ
//! only per-section, which is what makes grafting and slice-accumulation
//! well defined.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionSpec {
    pub depth: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub sections: Vec<SectionSpec>,
    /// Free-form label carried through grafting and checkpoints; used to tag
    /// which candidate or seed produced a model.
    pub seed_tag: String,
}

impl ArchSpec {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        sections: Vec<(usize, usize)>,
        seed_tag: &str,
    ) -> Result<Self> {
        let arch = ArchSpec {
            input_dim,
            output_dim,
            sections: sections
                .into_iter()
                .map(|(depth, width)| SectionSpec { depth, width })
                .collect(),
            seed_tag: seed_tag.to_string(),
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::BadArch(format!(
                "input and output dims must be positive, got {} -> {}",
                self.input_dim, self.output_dim
            )));
        }
        if self.sections.is_empty() {
            return Err(Error::BadArch("at least one section is required".into()));
        }
        for (s, sec) in self.sections.iter().enumerate() {
            if sec.depth == 0 || sec.width == 0 {
                return Err(Error::BadArch(format!(
                    "section {s} must have positive depth and width, got depth {} width {}",
                    sec.depth, sec.width
                )));
            }
        }
        Ok(())
    }

    pub fn n_sections(&self) -> usize {
        self.sections.len()
    }

    /// Width feeding section `s`: the input dimension for the first section,
    /// the previous section's width otherwise.
    pub fn width_before(&self, s: usize) -> usize {
        if s == 0 {
            self.input_dim
        } else {
            self.sections[s - 1].width
        }
    }

    pub fn last_width(&self) -> usize {
        self.sections.last().expect("validated arch").width
    }

    /// True when `self` fits inside `other`: equal endpoint dimensions and
    /// section count, with every per-section depth and width no larger.
    /// Labels are ignored.
    pub fn fits_within(&self, other: &ArchSpec) -> bool {
        self.input_dim == other.input_dim
            && self.output_dim == other.output_dim
            && self.sections.len() == other.sections.len()
            && self
                .sections
                .iter()
                .zip(other.sections.iter())
                .all(|(a, b)| a.depth <= b.depth && a.width <= b.width)
    }

    /// Structural equality, ignoring the label.
    pub fn same_structure(&self, other: &ArchSpec) -> bool {
        self.input_dim == other.input_dim
            && self.output_dim == other.output_dim
            && self.sections == other.sections
    }

    /// Elementwise maximum over a set of candidate architectures: the global
    /// model is built at the largest depth and width per section.
    pub fn global_over(candidates: &[ArchSpec], seed_tag: &str) -> Result<ArchSpec> {
        let first = candidates
            .first()
            .ok_or_else(|| Error::BadArch("empty candidate list".into()))?;
        let mut sections = first.sections.clone();
        for cand in candidates.iter().skip(1) {
            if cand.input_dim != first.input_dim
                || cand.output_dim != first.output_dim
                || cand.sections.len() != first.sections.len()
            {
                return Err(Error::BadArch(format!(
                    "candidate '{}' disagrees with '{}' on fixed dimensions",
                    cand.seed_tag, first.seed_tag
                )));
            }
            for (acc, sec) in sections.iter_mut().zip(cand.sections.iter()) {
                acc.depth = acc.depth.max(sec.depth);
                acc.width = acc.width.max(sec.width);
            }
        }
        let global = ArchSpec {
            input_dim: first.input_dim,
            output_dim: first.output_dim,
            sections,
            seed_tag: seed_tag.to_string(),
        };
        global.validate()?;
        Ok(global)
    }

    /// Shapes of the dense layers (entry, blocks, output) as `(out, in)`
    /// pairs, in network order. Normalization layers are elementwise and are
    /// not listed.
    pub fn linear_layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        for (s, sec) in self.sections.iter().enumerate() {
            dims.push((sec.width, self.width_before(s)));
            for _ in 0..sec.depth {
                dims.push((sec.width, sec.width));
            }
        }
        dims.push((self.output_dim, self.last_width()));
        dims
    }

    /// Number of trainable parameters (dense weights and biases plus
    /// normalization gains and shifts; fixed statistics are not trainable).
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for (s, sec) in self.sections.iter().enumerate() {
            count += sec.width * self.width_before(s) + sec.width; // entry
            count += 2 * sec.width; // norm gain and shift
            count += sec.depth * (sec.width * sec.width + sec.width); // blocks
        }
        count += self.output_dim * self.last_width() + self.output_dim; // output
        count
    }
}

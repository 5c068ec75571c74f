//! Bit-exact model checkpoints.
//!
//! Layout: the magic bytes `FEDFA1`, a little-endian u32 length followed by
//! the architecture as canonical JSON (fixed field order), then every layer's
//! tensors in network order. Each tensor is a little-endian u32 rank, one
//! little-endian u32 per dimension, and the raw little-endian f64 payload.
//! Layers contribute weight and bias; normalization layers append their
//! fixed mean and std. Round-tripping preserves every bit of every value.

use std::fs;
use std::path::Path;

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::model::{layer_templates, Layer, LayerKind, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"FEDFA1";

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model to the checkpoint byte format.
pub fn serialize(model: &Model) -> Result<Vec<u8>> {
    model.validate().map_err(|e| {
        Error::BadCheckpoint(format!("refusing to serialize an inconsistent model: {e}"))
    })?;
    let arch_json = serde_json::to_vec(&model.arch)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&arch_json);
    for layer in &model.layers {
        push_tensor(&mut buf, &layer.weight);
        push_tensor(&mut buf, &layer.bias);
        if let (Some(m), Some(s)) = (&layer.norm_mean, &layer.norm_std) {
            push_tensor(&mut buf, m);
            push_tensor(&mut buf, s);
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BadCheckpoint(format!(
                "truncated payload: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, expected_shape: &[usize]) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank != expected_shape.len() {
            return Err(Error::BadCheckpoint(format!(
                "tensor rank {} where the architecture wants rank {}",
                rank,
                expected_shape.len()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        if shape != expected_shape {
            return Err(Error::BadCheckpoint(format!(
                "tensor shape {shape:?} where the architecture wants {expected_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(8) {
            let mut b = [0u8; 8];
            b.copy_from_slice(chunk);
            data.push(f64::from_le_bytes(b));
        }
        Tensor::new(shape, data)
            .map_err(|e| Error::BadCheckpoint(format!("invalid tensor payload: {e}")))
    }
}

/// Parses a checkpoint back into a model. Any structural disagreement with
/// the embedded architecture, truncation, trailing garbage or non-finite
/// value is rejected.
pub fn deserialize(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::BadCheckpoint("bad magic bytes".into()));
    }
    let json_len = r.u32()? as usize;
    let arch: ArchSpec = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::BadCheckpoint(format!("invalid architecture header: {e}")))?;
    arch.validate()
        .map_err(|e| Error::BadCheckpoint(format!("inconsistent architecture header: {e}")))?;
    let mut layers = Vec::new();
    for t in layer_templates(&arch) {
        let weight = r.tensor(&[t.weight_shape.0, t.weight_shape.1])?;
        let bias = r.tensor(&[t.bias_len])?;
        let (norm_mean, norm_std) = if t.has_stats {
            (Some(r.tensor(&[t.bias_len])?), Some(r.tensor(&[t.bias_len])?))
        } else {
            (None, None)
        };
        layers.push(Layer {
            kind: t.kind,
            section: t.section,
            block_index: t.block_index,
            weight,
            bias,
            norm_mean,
            norm_std,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::BadCheckpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let model = Model { arch, layers };
    model
        .validate()
        .map_err(|e| Error::BadCheckpoint(format!("inconsistent payload: {e}")))?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, serialize(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    deserialize(&bytes)
}

/// True when a layer is a static normalization layer (used by callers that
/// skip fixed statistics).
pub fn is_norm(layer: &Layer) -> bool {
    layer.kind == LayerKind::StaticNorm
}

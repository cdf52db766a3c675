//! Binary checkpoint container.
//!
//! Little-endian layout:
//! ```text
//! magic "EUCN" | version u32 = 1 | epoch u32 | lambda f32 | seed u64 |
//! tensor count u32 | per tensor: name len u16, UTF-8 name, ndim u8,
//! dims u32 × ndim, f32 data
//! ```

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::io::{write_atomic, Reader};
use crate::nn::Model;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"EUCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub lambda: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

pub(crate) fn write_header(out: &mut Vec<u8>, magic: [u8; 4], version: u32, meta: &CheckpointMeta, count: usize) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.lambda.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
}

pub(crate) fn write_tensor_header(out: &mut Vec<u8>, name: &str, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

/// Reads magic, version and meta; returns the tensor count.
pub(crate) fn read_header(
    r: &mut Reader<'_>,
    magic: [u8; 4],
    version: u32,
) -> Result<(CheckpointMeta, usize), CheckpointError> {
    let found = r.take(4).ok_or(CheckpointError::Truncated(r.pos))?;
    if found != magic {
        let mut m = [0u8; 4];
        m.copy_from_slice(found);
        return Err(CheckpointError::BadMagic(m));
    }
    let v = r.u32().ok_or(CheckpointError::Truncated(r.pos))?;
    if v != version {
        return Err(CheckpointError::Version {
            found: v,
            expected: version,
        });
    }
    let t = |r: &Reader<'_>| CheckpointError::Truncated(r.pos);
    let epoch = r.u32().ok_or_else(|| t(r))?;
    let lambda = r.f32().ok_or_else(|| t(r))?;
    let seed = r.u64().ok_or_else(|| t(r))?;
    let count = r.u32().ok_or_else(|| t(r))? as usize;
    Ok((CheckpointMeta { epoch, lambda, seed }, count))
}

pub(crate) fn read_tensor_header(r: &mut Reader<'_>) -> Result<(String, Vec<usize>), CheckpointError> {
    let t = |r: &Reader<'_>| CheckpointError::Truncated(r.pos);
    let len = r.u16().ok_or_else(|| t(r))? as usize;
    let name = r.take(len).ok_or_else(|| t(r))?;
    let name = String::from_utf8(name.to_vec())
        .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
    let ndim = r.u8().ok_or_else(|| t(r))? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32().ok_or_else(|| t(r))? as usize);
    }
    if dims.is_empty() || dims.contains(&0) {
        return Err(CheckpointError::Malformed(format!("tensor {name} has shape {dims:?}")));
    }
    Ok((name, dims))
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            tensors: model.named_tensors(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model recorded in the `arch` tensor and loads its state.
    pub fn to_model(&self) -> Result<Model, CheckpointError> {
        let arch = self
            .tensor("arch")
            .ok_or_else(|| CheckpointError::Malformed("missing arch record".into()))?;
        let mut model = Model::from_arch_code(arch.data())?;
        model.load_named(&self.tensors)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(&mut out, MAGIC, VERSION, &self.meta, self.tensors.len());
        for (name, t) in &self.tensors {
            write_tensor_header(&mut out, name, t.shape());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        let (meta, count) = read_header(&mut r, MAGIC, VERSION)?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let (name, dims) = read_tensor_header(&mut r)?;
            let len: usize = dims.iter().product();
            let raw = r
                .take(len.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)
                .ok_or(CheckpointError::Truncated(r.pos))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect::<Vec<_>>();
            tensors.push((name, Tensor::from_raw(dims, data)));
        }
        if !r.is_empty() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

pub fn checkpoint_save(model: &Model, meta: CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &Checkpoint::from_model(model, meta).to_bytes())
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

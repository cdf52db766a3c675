//! Quantised checkpoint: the float container layout with a one-byte dtype
//! after each tensor header. dtype 0 is f32 data; dtype 1 is `bits u8`,
//! `scale f32`, then one i8 per element.

use std::path::Path;

use super::{QTensor, QuantLayer, QuantParams, QuantizedModel};
use crate::error::{CheckpointError, Error, Result};
use crate::io::{write_atomic, Reader};
use crate::nn::Model;
use crate::tensor::Tensor;
use crate::train::{read_header, read_tensor_header, write_header, write_tensor_header, CheckpointMeta};

pub const QMAGIC: [u8; 4] = *b"EUCQ";
pub const QVERSION: u32 = 1;

const F32: u8 = 0;
const I8: u8 = 1;

fn to_bytes(q: &QuantizedModel, meta: &CheckpointMeta) -> Vec<u8> {
    let named = q.model.named_tensors();
    let mut out = Vec::new();
    write_header(&mut out, QMAGIC, QVERSION, meta, named.len());
    for (name, t) in &named {
        write_tensor_header(&mut out, name, t.shape());
        let ql = q.layers.iter().find(|l| format!("layers.{}.weight", l.index) == *name);
        match ql {
            Some(l) => {
                out.push(I8);
                out.push(l.weights.params.bits as u8);
                out.extend_from_slice(&l.weights.params.scale.to_le_bytes());
                out.extend(l.weights.data().iter().map(|&v| v as u8));
            }
            None => {
                out.push(F32);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

fn from_bytes(bytes: &[u8]) -> Result<(QuantizedModel, CheckpointMeta)> {
    let mut r = Reader::new(bytes);
    let (meta, count) = read_header(&mut r, QMAGIC, QVERSION)?;
    let trunc = |r: &Reader<'_>| Error::Checkpoint(CheckpointError::Truncated(r.pos));
    let mut floats = Vec::new();
    let mut ints = Vec::new();
    for _ in 0..count {
        let (name, dims) = read_tensor_header(&mut r)?;
        let len: usize = dims.iter().product();
        match r.u8().ok_or_else(|| trunc(&r))? {
            F32 => {
                let raw = r.take(len * 4).ok_or_else(|| trunc(&r))?;
                let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                floats.push((name, Tensor::from_raw(dims, data)));
            }
            I8 => {
                let bits = r.u8().ok_or_else(|| trunc(&r))? as u32;
                let scale = r.f32().ok_or_else(|| trunc(&r))?;
                let raw = r.take(len).ok_or_else(|| trunc(&r))?;
                let params = QuantParams::new(scale, bits)
                    .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
                let q = QTensor::new(&dims, raw.iter().map(|&b| b as i8).collect(), params)
                    .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
                floats.push((name.clone(), super::dequantize(&q)));
                ints.push((name, q));
            }
            d => return Err(CheckpointError::Malformed(format!("unknown dtype {d} for {name}")).into()),
        }
    }
    if !r.is_empty() {
        return Err(CheckpointError::Malformed("trailing bytes".into()).into());
    }
    let arch = floats
        .iter()
        .find(|(n, _)| n == "arch")
        .ok_or_else(|| CheckpointError::Malformed("missing arch record".into()))?;
    let mut model = Model::from_arch_code(arch.1.data())?;
    model.load_named(&floats)?;
    let mut layers = Vec::new();
    for (name, q) in ints {
        let index = name
            .strip_prefix("layers.")
            .and_then(|s| s.strip_suffix(".weight"))
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| CheckpointError::Malformed(format!("integer tensor {name} is not a layer weight")))?;
        let sim = model.layers()[index]
            .sim()
            .ok_or_else(|| CheckpointError::Malformed(format!("{name} is not a similarity layer")))?;
        layers.push(QuantLayer {
            index,
            weights: QTensor::new(sim.weights.shape(), q.data().to_vec(), q.params)?,
            stride: sim.stride,
            pad: sim.pad,
        });
    }
    layers.sort_by_key(|l| l.index);
    Ok((QuantizedModel::from_parts(model, layers)?, meta))
}

pub fn save_quantized(q: &QuantizedModel, meta: CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &to_bytes(q, &meta))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<(QuantizedModel, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

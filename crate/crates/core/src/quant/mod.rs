//! Symmetric post-training quantisation of Euclid layers.
//!
//! Activations and weights of a layer share one scale, so `qx − qw` is an
//! exact integer and the squared distance can be read from a lookup table
//! and summed in an `i64` accumulator.

mod container;

use log::warn;
use serde::{Deserialize, Serialize};

pub use container::{load_quantized, save_quantized, QMAGIC, QVERSION};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::parallel::Exec;
use crate::similarity::SimilarityKind;
use crate::tensor::{ConvGeometry, Tensor};
use crate::train::{evaluate, EVAL_BATCH};

pub const DEFAULT_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub bits: u32,
}

impl QuantParams {
    pub fn new(scale: f32, bits: u32) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::Range {
                what: "bits",
                value: bits as f64,
                lo: 2.0,
                hi: 8.0,
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::QuantContract(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(QuantParams { scale, bits })
    }

    /// Largest magnitude used by the symmetric grid, `2^(bits−1) − 1`.
    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Full two's-complement range `[−2^(bits−1), 2^(bits−1) − 1]`;
    /// quantisation itself only produces `±qmax`.
    pub fn representable(&self) -> (i32, i32) {
        (-(1 << (self.bits - 1)), self.qmax())
    }

    /// `clamp(round(x / scale))`, rounding half away from zero.
    #[inline]
    pub fn quantize_value(&self, x: f32) -> i8 {
        let m = self.qmax() as f32;
        (x / self.scale).round().clamp(-m, m) as i8
    }

    #[inline]
    pub fn dequantize_value(&self, q: i8) -> f32 {
        q as f32 * self.scale
    }
}

/// Scale from the largest magnitude over `tensors`. An all-zero set gets
/// scale 1 and a warning.
pub fn calibrate<'a>(tensors: impl IntoIterator<Item = &'a Tensor>, bits: u32) -> Result<QuantParams> {
    let mut max_abs = 0.0f32;
    let mut seen = false;
    for t in tensors {
        if !t.all_finite() {
            return Err(Error::NonFinite("calibration tensor".into()));
        }
        seen |= !t.is_empty();
        max_abs = max_abs.max(t.max_abs());
    }
    if !seen {
        return Err(Error::Degenerate("calibration set is empty".into()));
    }
    let probe = QuantParams::new(1.0, bits)?;
    if max_abs == 0.0 {
        warn!("degenerate calibration: all values are zero, using scale 1.0");
        return Ok(probe);
    }
    QuantParams::new(max_abs / probe.qmax() as f32, bits)
}

/// Integer tensor with its quantisation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    pub params: QuantParams,
}

impl QTensor {
    pub fn new(shape: &[usize], data: Vec<i8>, params: QuantParams) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Length {
                got: data.len(),
                expected: n,
            });
        }
        let (lo, hi) = params.representable();
        if let Some(&q) = data.iter().find(|&&q| !(lo..=hi).contains(&(q as i32))) {
            return Err(Error::QuantContract(format!("value {q} outside [{lo}, {hi}] for {} bits", params.bits)));
        }
        Ok(QTensor {
            shape: shape.to_vec(),
            data,
            params,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }
}

pub fn quantize(t: &Tensor, params: QuantParams) -> QTensor {
    QTensor {
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|&x| params.quantize_value(x)).collect(),
        params,
    }
}

pub fn dequantize(q: &QTensor) -> Tensor {
    Tensor::from_raw(
        q.shape.clone(),
        q.data.iter().map(|&v| q.params.dequantize_value(v)).collect(),
    )
}

/// Squares of every difference of two `bits`-bit symmetric integers,
/// indexed by `d + 2^bits − 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquareLut {
    bits: u32,
    table: Vec<u32>,
}

impl SquareLut {
    pub fn new(bits: u32) -> Result<Self> {
        if !(2..=12).contains(&bits) {
            return Err(Error::Config(format!("square table supports 2..=12 bits, got {bits}")));
        }
        let r = (1i64 << bits) - 1;
        let table = (-r..=r).map(|d| (d * d) as u32).collect();
        Ok(SquareLut { bits, table })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Largest |d| covered.
    pub fn reach(&self) -> i32 {
        (1 << self.bits) - 1
    }

    #[inline(always)]
    pub fn get(&self, d: i32) -> u32 {
        self.table[(d + self.reach()) as usize]
    }
}

pub fn build_square_lut(bits: u32) -> Result<SquareLut> {
    SquareLut::new(bits)
}

/// Integer Euclid convolution: per output `acc = Σ lut[qx − qw]`,
/// `y = −½·scale²·acc`. Zero padding is the integer 0.
pub fn qeuclid_conv2d(qx: &QTensor, qw: &QTensor, lut: &SquareLut, stride: usize, pad: usize) -> Result<Tensor> {
    qeuclid_conv2d_with(qx, qw, lut, stride, pad, Exec::default())
}

pub fn qeuclid_conv2d_with(
    qx: &QTensor,
    qw: &QTensor,
    lut: &SquareLut,
    stride: usize,
    pad: usize,
    exec: Exec,
) -> Result<Tensor> {
    if qx.params != qw.params {
        return Err(Error::QuantContract(format!(
            "activation and weight grids differ: {:?} vs {:?}",
            qx.params, qw.params
        )));
    }
    let (lo, hi) = qx.params.representable();
    if hi - lo > lut.reach() {
        return Err(Error::QuantContract(format!(
            "{}-bit square table cannot cover {}-bit differences",
            lut.bits(),
            qx.params.bits
        )));
    }
    let (&[n, c, h, w], &[co, ci, kh, kw]) = (qx.shape(), qw.shape()) else {
        return Err(Error::Shape(format!(
            "expected NCHW input and [co, ci, k, k] weights, got {:?} and {:?}",
            qx.shape(),
            qw.shape()
        )));
    };
    if c != ci {
        return Err(Error::Shape(format!("input has {c} channels, weights expect {ci}")));
    }
    let geo = ConvGeometry::new([c, h, w], kh, kw, stride, pad)?;
    let (positions, k, sl) = (geo.positions(), geo.patch_len(), geo.sample_len());
    let scale = qx.params.scale as f64;
    let factor = -0.5 * scale * scale;
    let xs = &qx.data;
    let ws = &qw.data;
    let mut out = vec![0.0f32; n * co * positions];
    exec.for_each_chunk(&mut out, co * positions, |s, y| {
        let sample: Vec<f32> = xs[s * sl..(s + 1) * sl].iter().map(|&v| v as f32).collect();
        let mut rows = vec![0.0f32; positions * k];
        geo.im2col_sample(&sample, &mut rows);
        let rows: Vec<i32> = rows.iter().map(|&v| v as i32).collect();
        for (l, wl) in ws.chunks_exact(k).enumerate() {
            for (p, row) in rows.chunks_exact(k).enumerate() {
                let acc: i64 = row
                    .iter()
                    .zip(wl)
                    .map(|(&a, &b)| lut.get(a - b as i32) as i64)
                    .sum();
                y[l * positions + p] = (factor * acc as f64) as f32;
            }
        }
    });
    Ok(Tensor::from_raw(vec![n, co, geo.out_h(), geo.out_w()], out))
}

/// One similarity layer with integer weights on its shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub index: usize,
    pub weights: QTensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Calibration {
    /// Weights only; activations saturate at the weight range.
    Weights,
    /// Weights and the activations that reach the layer on a calibration set.
    WeightsAndActivations,
}

/// A model whose similarity layers run through [`qeuclid_conv2d`]; all
/// other layers (batchnorm, pooling) stay in floating point.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    /// Float model with dequantised similarity weights.
    pub model: Model,
    pub layers: Vec<QuantLayer>,
    lut: SquareLut,
}

impl QuantizedModel {
    pub(crate) fn from_parts(mut model: Model, layers: Vec<QuantLayer>) -> Result<Self> {
        let bits = layers.first().map_or(DEFAULT_BITS, |l| l.weights.params.bits);
        for q in &layers {
            let sim = model.layers_mut()[q.index]
                .sim_mut()
                .ok_or_else(|| Error::QuantContract(format!("layer {} is not a similarity layer", q.index)))?;
            if sim.weights.len() != q.weights.data.len() {
                return Err(Error::Length {
                    got: q.weights.data.len(),
                    expected: sim.weights.len(),
                });
            }
            let shape = sim.weights.shape().to_vec();
            sim.weights = dequantize(&q.weights).reshape(&shape)?;
        }
        Ok(QuantizedModel {
            model,
            layers,
            lut: SquareLut::new(bits)?,
        })
    }

    pub fn bits(&self) -> u32 {
        self.lut.bits()
    }

    pub fn params(&self, index: usize) -> Option<QuantParams> {
        self.layers.iter().find(|q| q.index == index).map(|q| q.weights.params)
    }

    /// Logits with integer similarity layers.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = match &self.model.norm {
            Some(n) => n.apply(x)?,
            None => x.clone(),
        };
        let [_, c, hh, ww] = h.dims4()?;
        if [c, hh, ww] != self.model.input_shape() {
            return Err(Error::Shape(format!("model expects {:?} inputs, got {:?}", self.model.input_shape(), x.shape())));
        }
        for (i, layer) in self.model.layers().iter().enumerate() {
            let step = || -> Result<Tensor> {
                match self.layers.iter().find(|q| q.index == i) {
                    Some(q) => {
                        let dense = matches!(layer, Layer::SimDense(_));
                        let input = if dense {
                            let [n, f] = h.dims2()?;
                            h.clone().reshape(&[n, f, 1, 1])?
                        } else {
                            h.clone()
                        };
                        let qx = quantize(&input, q.weights.params);
                        let y = qeuclid_conv2d_with(&qx, &q.weights, &self.lut, q.stride, q.pad, self.model.exec)?;
                        if dense {
                            let n = y.shape()[0];
                            let o = y.shape()[1];
                            y.reshape(&[n, o])
                        } else {
                            Ok(y)
                        }
                    }
                    None => layer.infer(&h, self.model.exec),
                }
            };
            h = step().map_err(|e| e.at_layer(i))?;
        }
        Ok(h)
    }

    pub fn evaluate_top1(&self, data: &Dataset) -> Result<f32> {
        let mut hits = 0usize;
        for (i, (images, labels)) in data.batches(EVAL_BATCH, 0, false).enumerate() {
            let logits = self.predict(&images).map_err(|e| e.at_batch(i))?;
            let c = logits.shape()[1];
            hits += logits
                .data()
                .chunks_exact(c)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
        }
        Ok(hits as f32 / data.len() as f32)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Quantises every similarity layer of a Euclid model. Each layer's scale
/// covers its weights and, if `calib` is given, the activations reaching it.
pub fn quantize_model(model: &Model, calib: Option<&Dataset>, bits: u32) -> Result<QuantizedModel> {
    let mut layers = Vec::new();
    let sims: Vec<usize> = model
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.sim().map(|_| i))
        .collect();
    for &i in &sims {
        let kind = model.layers()[i].sim().unwrap().kind.resolve();
        if kind != SimilarityKind::Euclid {
            return Err(Error::UnsupportedKind {
                layer: i,
                kind: kind.to_string(),
            });
        }
    }
    let mut act_max = vec![0.0f32; sims.len()];
    if let Some(data) = calib {
        for (b, (images, _)) in data.batches(EVAL_BATCH, 0, false).enumerate() {
            let mut h = match &model.norm {
                Some(n) => n.apply(&images)?,
                None => images,
            };
            let mut s = 0;
            for (i, layer) in model.layers().iter().enumerate() {
                if s < sims.len() && sims[s] == i {
                    act_max[s] = act_max[s].max(h.max_abs());
                    s += 1;
                }
                h = layer.infer(&h, model.exec).map_err(|e| e.at_layer(i).at_batch(b))?;
            }
        }
    }
    for (s, &i) in sims.iter().enumerate() {
        let sim = model.layers()[i].sim().unwrap();
        let act = Tensor::from_raw(vec![1], vec![act_max[s]]);
        let params = calibrate([&sim.weights, &act], bits).map_err(|e| e.at_layer(i))?;
        layers.push(QuantLayer {
            index: i,
            weights: quantize(&sim.weights, params),
            stride: sim.stride,
            pad: sim.pad,
        });
    }
    QuantizedModel::from_parts(model.clone(), layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantReport {
    pub name: String,
    pub scale: f32,
    /// Largest `|dequantize(quantize(w)) − w|` over the layer's weights.
    pub max_err: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub bits: u32,
    pub per_layer: Vec<LayerQuantReport>,
    pub top1_float: f32,
    pub top1_quant: f32,
    /// Accuracy when calibrating on the evaluation set itself.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_quant_eval_calibrated: Option<f32>,
}

fn layer_reports(float: &Model, q: &QuantizedModel) -> Vec<LayerQuantReport> {
    q.layers
        .iter()
        .map(|l| {
            let w = float.layers()[l.index].sim().unwrap().weights.data();
            let max_err = w
                .iter()
                .zip(l.weights.data())
                .map(|(&x, &v)| (l.weights.params.dequantize_value(v) - x).abs())
                .fold(0.0f32, f32::max);
            LayerQuantReport {
                name: format!("layers.{}.weight", l.index),
                scale: l.weights.params.scale,
                max_err,
            }
        })
        .collect()
}

/// Quantises with `calib` and reports float and integer accuracy on `eval`,
/// plus the accuracy obtained when calibrating on `eval` directly.
pub fn quant_report(model: &Model, calib: &Dataset, eval: &Dataset, bits: u32) -> Result<(QuantizedModel, QuantReport)> {
    let q = quantize_model(model, Some(calib), bits)?;
    let top1_float = evaluate(model, eval)?.top1;
    let top1_quant = q.evaluate_top1(eval)?;
    let self_cal = quantize_model(model, Some(eval), bits)?.evaluate_top1(eval)?;
    let report = QuantReport {
        bits,
        per_layer: layer_reports(model, &q),
        top1_float,
        top1_quant,
        top1_quant_eval_calibrated: Some(self_cal),
    };
    Ok((q, report))
}

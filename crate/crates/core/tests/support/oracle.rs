//! Straightforward f64 loop-nest versions of every layer, written without
//! reference to the library kernels. Used as the ground truth in gradient and
//! equivalence checks.
#![allow(dead_code)]

use euclidnet::nn::{Layer, Model};
use euclidnet::{SimilarityKind, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        T64 { shape: shape.to_vec(), data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        T64::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&v| v as f32).collect::<Vec<_>>()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sim(kind: SimilarityKind, x: f64, w: f64) -> f64 {
    match kind {
        SimilarityKind::Conv => x * w,
        SimilarityKind::Euclid => -0.5 * (x - w).powi(2),
        SimilarityKind::Adder => -(x - w).abs(),
        SimilarityKind::Mfo => sgn(x) * sgn(w) * (x.abs() + w.abs()),
        SimilarityKind::Synapse => sgn(x) * sgn(w) * x.abs().min(w.abs()),
        SimilarityKind::Homotopy(l) => {
            let l = l as f64;
            (1.0 - l) * x * w + l * (-0.5 * (x - w).powi(2))
        }
    }
}

/// `[N, C, H, W]` ⋆ `[O, C, K, K]` with zero padding.
pub fn conv(x: &T64, w: &T64, stride: usize, pad: usize, kind: SimilarityKind) -> T64 {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    assert_eq!(w.shape[1], c);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for l in 0..o {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let (y, z) = ((r * stride + i) as isize - pad as isize, (q * stride + j) as isize - pad as isize);
                                let xv = if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                    0.0
                                } else {
                                    x.data[((s * c + ch) * h + y as usize) * wd + z as usize]
                                };
                                acc += sim(kind, xv, w.data[((l * c + ch) * k + i) * k + j]);
                            }
                        }
                    }
                    out[((s * o + l) * oh + r) * ow + q] = acc;
                }
            }
        }
    }
    T64::new(&[n, o, oh, ow], out)
}

/// `[N, F]` against `[O, F]` (or `[O, F, 1, 1]`) weights.
pub fn dense(x: &T64, w: &T64, kind: SimilarityKind) -> T64 {
    let (n, f) = (x.shape[0], x.shape[1]);
    let o = w.shape[0];
    assert_eq!(w.len(), o * f);
    let mut out = vec![0.0; n * o];
    for s in 0..n {
        for l in 0..o {
            out[s * o + l] = (0..f).map(|i| sim(kind, x.data[s * f + i], w.data[l * f + i])).sum();
        }
    }
    T64::new(&[n, o], out)
}

/// Training-mode batchnorm with biased batch variance.
pub fn batchnorm(x: &T64, gamma: &[f64], beta: &[f64], eps: f64) -> T64 {
    let (n, c) = (x.shape[0], x.shape[1]);
    let s: usize = x.shape[2..].iter().product();
    let mut out = x.data.clone();
    for ch in 0..c {
        let idx: Vec<usize> = (0..n).flat_map(|i| ((i * c + ch) * s)..((i * c + ch + 1) * s)).collect();
        let m = idx.len() as f64;
        let mean = idx.iter().map(|&i| x.data[i]).sum::<f64>() / m;
        let var = idx.iter().map(|&i| (x.data[i] - mean).powi(2)).sum::<f64>() / m;
        for &i in &idx {
            out[i] = gamma[ch] * (x.data[i] - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    T64::new(&x.shape, out)
}

pub fn relu(x: &T64) -> T64 {
    T64::new(&x.shape, x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn maxpool2(x: &T64) -> T64 {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = Vec::new();
    for p in 0..n * c {
        for r in 0..h / 2 {
            for q in 0..w / 2 {
                let at = |i: usize, j: usize| x.data[p * h * w + (2 * r + i) * w + 2 * q + j];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    T64::new(&[n, c, h / 2, w / 2], out)
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &T64, labels: &[usize]) -> f64 {
    let (n, c) = (logits.shape[0], logits.shape[1]);
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits.data[s * c..(s + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / n as f64
}

#[derive(Debug, Clone)]
pub enum OLayer {
    Conv { w: T64, stride: usize, pad: usize, kind: SimilarityKind },
    Bn { gamma: Vec<f64>, beta: Vec<f64>, eps: f64 },
    Relu,
    Pool,
    Flatten,
    Dense { w: T64, kind: SimilarityKind },
}

/// Mirrors a library model (training-mode batchnorm, no input normalisation).
pub fn mirror(model: &Model) -> Vec<OLayer> {
    model
        .layers()
        .iter()
        .map(|l| match l {
            Layer::SimConv(c) => OLayer::Conv { w: T64::from_tensor(&c.weights), stride: c.stride, pad: c.pad, kind: c.kind },
            Layer::BatchNorm(bn) => OLayer::Bn {
                gamma: T64::from_tensor(&bn.gamma).data,
                beta: T64::from_tensor(&bn.beta).data,
                eps: bn.eps as f64,
            },
            Layer::Relu => OLayer::Relu,
            Layer::MaxPool2 => OLayer::Pool,
            Layer::Flatten => OLayer::Flatten,
            Layer::SimDense(d) => OLayer::Dense { w: T64::from_tensor(&d.inner.weights), kind: d.inner.kind },
        })
        .collect()
}

pub fn forward(layers: &[OLayer], x: &T64) -> T64 {
    let mut h = x.clone();
    for l in layers {
        h = match l {
            OLayer::Conv { w, stride, pad, kind } => conv(&h, w, *stride, *pad, *kind),
            OLayer::Bn { gamma, beta, eps } => batchnorm(&h, gamma, beta, *eps),
            OLayer::Relu => relu(&h),
            OLayer::Pool => maxpool2(&h),
            OLayer::Flatten => {
                let n = h.shape[0];
                T64::new(&[n, h.len() / n], h.data)
            }
            OLayer::Dense { w, kind } => dense(&h, w, *kind),
        };
    }
    h
}

/// Mutable views of the trainable tensors in library parameter order
/// (sim weights, then gamma and beta per batchnorm).
pub fn params_mut(layers: &mut [OLayer]) -> Vec<&mut Vec<f64>> {
    let mut out = Vec::new();
    for l in layers {
        match l {
            OLayer::Conv { w, .. } | OLayer::Dense { w, .. } => out.push(&mut w.data),
            OLayer::Bn { gamma, beta, .. } => {
                out.push(gamma);
                out.push(beta);
            }
            _ => {}
        }
    }
    out
}

/// Central differences of `f` with respect to every entry of `v`.
pub fn numeric_grad(v: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let keep = v[i];
            v[i] = keep + h;
            let up = f(v);
            v[i] = keep - h;
            let down = f(v);
            v[i] = keep;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both are negligible.
pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    rel_err_floor(analytic, numeric, 0.0)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err_floor(analytic: &[f32], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let a: Vec<f64> = analytic.iter().map(|&v| v as f64).collect();
    let diff: Vec<f64> = a.iter().zip(numeric).map(|(x, y)| x - y).collect();
    let scale = norm(&a).max(norm(numeric)).max(floor);
    if scale < 1e-9 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

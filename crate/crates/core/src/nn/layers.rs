use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits a `[N, C, ...]` tensor into (N, C, spatial).
fn nc_spatial(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s => Err(Error::Shape(format!("batchnorm expects 2-d or 4-d input, got {s:?}"))),
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Per-channel batch normalisation over `[N, C]` or `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub const DEFAULT_EPS: f32 = 1e-5;
    pub const DEFAULT_MOMENTUM: f32 = 0.1;

    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: Tensor::new(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::new(&[channels], 1.0)?,
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, s) = nc_spatial(x)?;
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm over {} channels got {c}",
                self.channels()
            )));
        }
        Ok((n, c, s))
    }

    /// Inference: normalise with the running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, s) = self.check(x)?;
        let mut out = x.clone();
        let (g, b) = (self.gamma.data(), self.beta.data());
        let (rm, rv) = (self.running_mean.data(), self.running_var.data());
        for i in 0..n {
            for ch in 0..c {
                let inv = 1.0 / (rv[ch] + self.eps).sqrt();
                let chunk = &mut out.data_mut()[(i * c + ch) * s..(i * c + ch + 1) * s];
                for v in chunk {
                    *v = g[ch] * ((*v - rm[ch]) * inv) + b[ch];
                }
            }
        }
        Ok(out)
    }

    /// Training: normalise with batch statistics, optionally folding them into
    /// the running averages.
    pub fn forward_train(&mut self, x: &Tensor, update_running: bool) -> Result<Tensor> {
        let (n, c, s) = self.check(x)?;
        let count = n * s;
        if count == 1 {
            warn!("batchnorm over a single value per channel; variance clamped to eps");
        }
        let xs = x.data();
        let mut xhat = vec![0.0f32; xs.len()];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let values = || (0..n).flat_map(move |i| xs[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied());
            let (lo, hi) = values().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let (mean, var) = if lo == hi {
                (lo, 0.0)
            } else {
                let mean = (values().map(f64::from).sum::<f64>() / count as f64) as f32;
                let var = values().map(|v| ((v - mean) as f64).powi(2)).sum::<f64>() / count as f64;
                (mean, var as f32)
            };
            let inv = 1.0 / (var.max(0.0) + self.eps).sqrt();
            inv_std[ch] = inv;
            for i in 0..n {
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                for (o, v) in xhat[r.clone()].iter_mut().zip(&xs[r]) {
                    *o = (v - mean) * inv;
                }
            }
            if update_running {
                let m = self.momentum;
                let unbiased = if count > 1 { var * count as f32 / (count - 1) as f32 } else { var };
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (1.0 - m) * *rm + m * mean;
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (1.0 - m) * *rv + m * unbiased;
            }
        }
        let (g, b) = (self.gamma.data(), self.beta.data());
        let mut out = vec![0.0f32; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                for (o, h) in out[r.clone()].iter_mut().zip(&xhat[r]) {
                    *o = g[ch] * h + b[ch];
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(Tensor::from_raw(x.shape().to_vec(), out))
    }

    /// Returns `(dx, dgamma, dbeta)` for the last training-mode forward.
    pub fn backward(&mut self, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (n, c, s) = self.check(dy)?;
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("batchnorm backward before forward".into()))?;
        if cache.xhat.len() != dy.len() {
            return Err(Error::Shape("batchnorm gradient shape differs from forward".into()));
        }
        let m = (n * s) as f32;
        let dys = dy.data();
        let g = self.gamma.data();
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        let mut dx = vec![0.0f32; dys.len()];
        for ch in 0..c {
            let ranges = || (0..n).map(move |i| (i * c + ch) * s..(i * c + ch + 1) * s);
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f32, 0.0f32);
            for r in ranges() {
                for (d, h) in dys[r.clone()].iter().zip(&cache.xhat[r]) {
                    sum_dy += d;
                    sum_dy_xhat += d * h;
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let k = g[ch] * cache.inv_std[ch] / m;
            for r in ranges() {
                for ((o, d), h) in dx[r.clone()].iter_mut().zip(&dys[r.clone()]).zip(&cache.xhat[r]) {
                    *o = k * (m * d - sum_dy - h * sum_dy_xhat);
                }
            }
        }
        Ok((
            Tensor::from_raw(dy.shape().to_vec(), dx),
            Tensor::from_raw(vec![c], dgamma),
            Tensor::from_raw(vec![c], dbeta),
        ))
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::Shape("relu gradient shape differs from input".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect();
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

/// 2×2 max pooling with stride 2. Returns the output and, per output, the
/// flat input index that won (first maximum in scan order).
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("2×2 pooling needs even spatial dims, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..oh {
            for q in 0..ow {
                let mut best = base + 2 * r * w + 2 * q;
                for idx in [best + 1, best + w, best + w + 1] {
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                out.push(xs[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_raw(vec![n, c, oh, ow], out), arg))
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    if argmax.len() != dy.len() {
        return Err(Error::Shape("pool gradient shape differs from forward".into()));
    }
    let mut dx = Tensor::zeros(input_shape)?;
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    x.clone().reshape(&[n, x.len() / n])
}

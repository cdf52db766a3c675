//! Convolution and dense layers with the multiply swapped for a similarity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::similarity::{AdderGradient, SimilarityKind};
use crate::tensor::{ConvGeometry, Tensor};

/// Runs `$body` with `$f` bound to a monomorphic closure for `$kind`.
macro_rules! with_similarity {
    ($kind:expr, $adder:expr, |$f:ident, $g:ident| $body:expr) => {{
        let adder = $adder;
        match $kind.resolve() {
            SimilarityKind::Conv => {
                let $f = |x: f32, w: f32| x * w;
                let $g = |x: f32, w: f32| (w, x);
                $body
            }
            SimilarityKind::Euclid => {
                let $f = |x: f32, w: f32| {
                    let d = x - w;
                    -0.5 * (d * d)
                };
                let $g = |x: f32, w: f32| (w - x, x - w);
                $body
            }
            k => {
                let $f = move |x: f32, w: f32| k.apply(x, w);
                let $g = move |x: f32, w: f32| k.grad(x, w, adder);
                $body
            }
        }
    }};
}

/// `Σ f(aᵢ, bᵢ)` with eight fixed accumulation lanes; the order depends only
/// on the length, so every caller sees the same rounding.
#[inline(always)]
pub(crate) fn lane_reduce<F: Fn(f32, f32) -> f32>(a: &[f32], b: &[f32], f: F) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, w) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += f(x[i], w[i]);
        }
    }
    let mut tail = 0.0f32;
    for (&x, &w) in ra.iter().zip(rb) {
        tail += f(x, w);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[derive(Debug, Clone)]
pub struct SimConv2d {
    /// `[c_out, c_in, k, k]`
    pub weights: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub kind: SimilarityKind,
    pub adder_grad: AdderGradient,
    pub(crate) cache: Option<Tensor>,
}

impl SimConv2d {
    pub fn new(weights: Tensor, stride: usize, pad: usize, kind: SimilarityKind) -> Result<Self> {
        let [_, _, kh, kw] = weights.dims4()?;
        if kh != kw {
            return Err(Error::Shape(format!("kernel must be square, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be ≥ 1".into()));
        }
        Ok(SimConv2d {
            weights,
            stride,
            pad,
            kind: kind.validate()?,
            adder_grad: AdderGradient::default(),
            cache: None,
        })
    }

    /// Fan-in scaled uniform init, bound `sqrt(6 / fan_in)`.
    pub fn init(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        kind: SimilarityKind,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let bound = (6.0 / fan_in as f32).sqrt();
        let data = (0..c_out * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect::<Vec<_>>();
        Self::new(Tensor::new(&[c_out, c_in, k, k], data)?, stride, pad, kind)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        let [_, c, h, w] = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "input has {c} channels, layer expects {}",
                self.in_channels()
            )));
        }
        let k = self.kernel();
        ConvGeometry::new([c, h, w], k, k, self.stride, self.pad)
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        let geo = self.geometry(x)?;
        if !x.all_finite() {
            return Err(Error::NonFinite("similarity layer input".into()));
        }
        let n = x.shape()[0];
        let (cout, positions, k) = (self.out_channels(), geo.positions(), geo.patch_len());
        let mut out = vec![0.0f32; n * cout * positions];
        let w = self.weights.data();
        let xs = x.data();
        with_similarity!(self.kind, self.adder_grad, |f, _g| {
            exec.for_each_chunk(&mut out, cout * positions, |s, y| {
                let mut rows = vec![0.0f32; positions * k];
                geo.im2col_sample(&xs[s * geo.sample_len()..(s + 1) * geo.sample_len()], &mut rows);
                for (l, wl) in w.chunks_exact(k).enumerate() {
                    let yl = &mut y[l * positions..(l + 1) * positions];
                    for (p, row) in rows.chunks_exact(k).enumerate() {
                        yl[p] = lane_reduce(row, wl, f);
                    }
                }
            })
        });
        Ok(Tensor::from_raw(
            vec![n, cout, geo.out_h(), geo.out_w()],
            out,
        ))
    }

    pub fn forward_train(&mut self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        let y = self.forward(x, exec)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    /// Returns `(dL/dx, dL/dw)` for input `x` and upstream gradient `dy`.
    pub fn backward_with(&self, x: &Tensor, dy: &Tensor, exec: Exec) -> Result<(Tensor, Tensor)> {
        let geo = self.geometry(x)?;
        let n = x.shape()[0];
        let (cout, positions, k) = (self.out_channels(), geo.positions(), geo.patch_len());
        let expected = [n, cout, geo.out_h(), geo.out_w()];
        if dy.shape() != expected {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                dy.shape(),
                expected
            )));
        }
        let w = self.weights.data();
        let (xs, dys) = (x.data(), dy.data());
        let sample_len = geo.sample_len();
        let mut dx = vec![0.0f32; x.len()];
        let partials: Vec<Vec<f32>> = with_similarity!(self.kind, self.adder_grad, |_f, g| {
            exec.map_chunks(&mut dx, sample_len, |s, dxs| {
                let mut rows = vec![0.0f32; positions * k];
                geo.im2col_sample(&xs[s * sample_len..(s + 1) * sample_len], &mut rows);
                let dys = &dys[s * cout * positions..(s + 1) * cout * positions];
                let mut dcol = vec![0.0f32; positions * k];
                let mut dw = vec![0.0f32; cout * k];
                for (p, (row, drow)) in rows.chunks_exact(k).zip(dcol.chunks_exact_mut(k)).enumerate() {
                    for (l, (wl, dwl)) in w.chunks_exact(k).zip(dw.chunks_exact_mut(k)).enumerate() {
                        let gy = dys[l * positions + p];
                        if gy == 0.0 {
                            continue;
                        }
                        for i in 0..k {
                            let (gx, gw) = g(row[i], wl[i]);
                            dwl[i] += gy * gw;
                            drow[i] += gy * gx;
                        }
                    }
                }
                geo.col2im_sample(&dcol, dxs);
                dw
            })
        });
        let mut dw = vec![0.0f32; w.len()];
        for part in &partials {
            for (a, b) in dw.iter_mut().zip(part) {
                *a += b;
            }
        }
        Ok((
            Tensor::from_raw(x.shape().to_vec(), dx),
            Tensor::from_raw(self.weights.shape().to_vec(), dw),
        ))
    }

    pub fn backward(&mut self, dy: &Tensor, exec: Exec) -> Result<(Tensor, Tensor)> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("backward called before forward".into()))?;
        self.backward_with(&x, dy, exec)
    }
}

/// Fully-connected similarity layer realised as a 1×1 convolution on a
/// `[N, F, 1, 1]` view of its input.
#[derive(Debug, Clone)]
pub struct SimDense {
    pub inner: SimConv2d,
}

impl SimDense {
    /// `weights` is `[out, in]`.
    pub fn new(weights: Tensor, kind: SimilarityKind) -> Result<Self> {
        let [o, i] = weights.dims2()?;
        Ok(SimDense {
            inner: SimConv2d::new(weights.reshape(&[o, i, 1, 1])?, 1, 0, kind)?,
        })
    }

    pub fn init(rng: &mut impl Rng, inputs: usize, outputs: usize, kind: SimilarityKind) -> Result<Self> {
        Ok(SimDense {
            inner: SimConv2d::init(rng, inputs, outputs, 1, 1, 0, kind)?,
        })
    }

    pub fn outputs(&self) -> usize {
        self.inner.out_channels()
    }

    pub fn inputs(&self) -> usize {
        self.inner.in_channels()
    }

    fn as_4d(x: &Tensor) -> Result<Tensor> {
        let [n, f] = x.dims2()?;
        x.clone().reshape(&[n, f, 1, 1])
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        let n = x.dims2()?[0];
        self.inner
            .forward(&Self::as_4d(x)?, exec)?
            .reshape(&[n, self.outputs()])
    }

    pub fn forward_train(&mut self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        let n = x.dims2()?[0];
        self.inner
            .forward_train(&Self::as_4d(x)?, exec)?
            .reshape(&[n, self.outputs()])
    }

    pub fn backward(&mut self, dy: &Tensor, exec: Exec) -> Result<(Tensor, Tensor)> {
        let [n, o] = dy.dims2()?;
        let (dx, dw) = self.inner.backward(&dy.clone().reshape(&[n, o, 1, 1])?, exec)?;
        let f = self.inputs();
        Ok((dx.reshape(&[n, f])?, dw))
    }
}

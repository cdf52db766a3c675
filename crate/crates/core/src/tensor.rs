//! Dense row-major `f32` tensors and the im2col patch layout used by every
//! similarity layer.

use crate::error::{Error, Result};

/// Initial contents for [`Tensor::new`].
#[derive(Debug, Clone)]
pub enum Fill {
    Value(f32),
    Values(Vec<f32>),
}

impl From<f32> for Fill {
    fn from(v: f32) -> Self {
        Fill::Value(v)
    }
}

impl From<Vec<f32>> for Fill {
    fn from(v: Vec<f32>) -> Self {
        Fill::Values(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("empty shape".into()));
    }
    if let Some(i) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!("dimension {i} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], fill: impl Into<Fill>) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match fill.into() {
            Fill::Value(v) => vec![v; len],
            Fill::Values(values) => {
                if values.len() != len {
                    return Err(Error::Length {
                        got: values.len(),
                        expected: len,
                    });
                }
                values
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    /// Caller guarantees `data.len() == product(shape)` and no zero dims.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(shape.iter().all(|&d| d > 0));
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::Length {
                got: self.data.len(),
                expected: len,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, a: f32) -> Tensor {
        self.map(|v| a * v)
    }

    /// Returns `[N, C, H, W]` or a shape error.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape(format!(
                "expected 4-d NCHW tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [n, c] => Ok([n, c]),
            _ => Err(Error::Shape(format!(
                "expected 2-d tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn norm2(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sub-tensor made of samples `[start, end)` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = self.shape[0];
        if start >= end || end > n {
            return Err(Error::Shape(format!(
                "batch slice {start}..{end} invalid for leading dim {n}"
            )));
        }
        let per = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_raw(
            shape,
            self.data[start * per..end * per].to_vec(),
        ))
    }

    /// Gathers samples along the leading axis in the given order.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        if indices.is_empty() {
            return Err(Error::Shape("empty gather".into()));
        }
        let per = self.data.len() / n;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= n {
                return Err(Error::Shape(format!("index {i} out of range {n}")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor::from_raw(shape, data))
    }
}

/// Convolution geometry shared by im2col/col2im and the similarity layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(
        [c, h, w]: [usize; 3],
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(Error::Shape("kernel extent must be ≥ 1".into()));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be ≥ 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output positions per sample.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Patch length `kh·kw·c`.
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Writes the patch rows of one sample (`positions × patch_len`) into `out`.
    /// Column order is (channel, ki, kj), matching `[c_out, c_in, kh, kw]` weights.
    pub fn im2col_sample(&self, x: &[f32], out: &mut [f32]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.patch_len());
        debug_assert_eq!(x.len(), self.sample_len());
        debug_assert_eq!(out.len(), oh * ow * k);
        for r in 0..oh {
            for s in 0..ow {
                let row = &mut out[(r * ow + s) * k..(r * ow + s + 1) * k];
                let mut col = 0;
                for c in 0..self.channels {
                    let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
                    for i in 0..self.kh {
                        let yy = (r * self.stride + i) as isize - self.pad as isize;
                        for j in 0..self.kw {
                            let xx = (s * self.stride + j) as isize - self.pad as isize;
                            row[col] = if yy >= 0
                                && xx >= 0
                                && (yy as usize) < self.height
                                && (xx as usize) < self.width
                            {
                                plane[yy as usize * self.width + xx as usize]
                            } else {
                                0.0
                            };
                            col += 1;
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds patch rows of one sample back onto the input grid.
    /// Accumulation visits positions in scan order, then columns in patch order.
    pub fn col2im_sample(&self, cols: &[f32], out: &mut [f32]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.patch_len());
        debug_assert_eq!(out.len(), self.sample_len());
        for r in 0..oh {
            for s in 0..ow {
                let row = &cols[(r * ow + s) * k..(r * ow + s + 1) * k];
                let mut col = 0;
                for c in 0..self.channels {
                    for i in 0..self.kh {
                        let yy = (r * self.stride + i) as isize - self.pad as isize;
                        for j in 0..self.kw {
                            let xx = (s * self.stride + j) as isize - self.pad as isize;
                            if yy >= 0
                                && xx >= 0
                                && (yy as usize) < self.height
                                && (xx as usize) < self.width
                            {
                                out[(c * self.height + yy as usize) * self.width + xx as usize] +=
                                    row[col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Receptive fields laid out one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl PatchMatrix {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Rows are ordered by (sample, out_y, out_x); padding contributes 0.0.
pub fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<PatchMatrix> {
    let [n, c, h, w] = x.dims4()?;
    let geo = ConvGeometry::new([c, h, w], kh, kw, stride, pad)?;
    let per_rows = geo.positions();
    let k = geo.patch_len();
    let mut data = vec![0.0; n * per_rows * k];
    for (sample, out) in x
        .data()
        .chunks_exact(geo.sample_len())
        .zip(data.chunks_exact_mut(per_rows * k))
    {
        geo.im2col_sample(sample, out);
    }
    Ok(PatchMatrix {
        rows: n * per_rows,
        cols: k,
        data,
    })
}

/// Inverse scatter of [`im2col`]: sums every patch entry back onto its source pixel.
pub fn col2im(
    patches: &PatchMatrix,
    shape: [usize; 4],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, c, h, w] = shape;
    let geo = ConvGeometry::new([c, h, w], kh, kw, stride, pad)?;
    if patches.cols != geo.patch_len() || patches.rows != n * geo.positions() {
        return Err(Error::Shape(format!(
            "patch matrix {}×{} does not match geometry {:?}",
            patches.rows, patches.cols, geo
        )));
    }
    let mut out = Tensor::zeros(&shape)?;
    let per = geo.positions() * geo.patch_len();
    for (cols, dst) in patches
        .data
        .chunks_exact(per)
        .zip(out.data_mut().chunks_exact_mut(geo.sample_len()))
    {
        geo.col2im_sample(cols, dst);
    }
    Ok(out)
}

/// Per-row index of the maximum; ties go to the lowest index.
pub fn argmax_row(t: &Tensor) -> Result<Vec<usize>> {
    let [_, c] = t.dims2()?;
    Ok(t.data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

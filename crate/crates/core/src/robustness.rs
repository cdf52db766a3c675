//! Input-perturbation sweeps: contrast/brightness `a·x + b` and Gaussian
//! blur, applied to raw `[0, 1]` pixels before the model's normalisation.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;
use crate::train::evaluate;

/// `a·x + b` elementwise, optionally clipped to `[0, 1]`.
pub fn pixel_transform(images: &Tensor, a: f32, b: f32, clip: bool) -> Result<Tensor> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Config(format!("transform parameters must be finite, got a={a}, b={b}")));
    }
    Ok(if clip {
        images.map(|x| (a * x + b).clamp(0.0, 1.0))
    } else {
        images.map(|x| a * x + b)
    })
}

/// Normalised `ksize × ksize` Gaussian, row-major. `sigma = 0` is a delta.
pub fn gaussian_kernel(sigma: f32, ksize: usize) -> Result<Vec<f32>> {
    if ksize % 2 == 0 {
        return Err(Error::Config(format!("blur kernel size must be odd, got {ksize}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("blur sigma must be finite and ≥ 0, got {sigma}")));
    }
    let r = (ksize / 2) as i64;
    let mut k = vec![0.0f64; ksize * ksize];
    if sigma == 0.0 {
        k[ksize * ksize / 2] = 1.0;
    } else {
        let s2 = 2.0 * (sigma as f64).powi(2);
        for i in -r..=r {
            for j in -r..=r {
                k[((i + r) as usize) * ksize + (j + r) as usize] = (-((i * i + j * j) as f64) / s2).exp();
            }
        }
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
    }
    Ok(k.into_iter().map(|v| v as f32).collect())
}

/// Mirror index without repeating the edge sample (`-1 → 1`).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Per-channel 2-D convolution with a normalised Gaussian, reflect padded.
pub fn gaussian_blur(images: &Tensor, sigma: f32, ksize: usize) -> Result<Tensor> {
    let kernel = gaussian_kernel(sigma, ksize)?;
    let [_, _, h, w] = images.dims4()?;
    if sigma == 0.0 {
        return Ok(images.clone());
    }
    let r = (ksize / 2) as i64;
    let mut out = images.clone();
    for (src, dst) in images.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for i in -r..=r {
                    let row = reflect(y as i64 + i, h) * w;
                    let krow = &kernel[((i + r) as usize) * ksize..];
                    for j in -r..=r {
                        acc += krow[(j + r) as usize] * src[row + reflect(x as i64 + j, w)];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// `x + N(0, σ²)` per pixel from a seeded stream.
pub fn additive_noise(images: &Tensor, sigma: f32, seed: u64) -> Result<Tensor> {
    let normal = Normal::new(0.0f32, sigma)
        .map_err(|_| Error::Config(format!("noise sigma must be finite and ≥ 0, got {sigma}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = images.clone();
    out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformGrid {
    pub a_values: Vec<f32>,
    pub b_values: Vec<f32>,
    #[serde(default)]
    pub clip: bool,
}

impl Default for TransformGrid {
    fn default() -> Self {
        TransformGrid {
            a_values: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            b_values: vec![-0.4, -0.2, 0.0, 0.2, 0.4],
            clip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurGrid {
    pub sigmas: Vec<f32>,
    pub kernel_sizes: Vec<usize>,
}

impl Default for BlurGrid {
    fn default() -> Self {
        BlurGrid {
            sigmas: vec![0.0, 0.5, 1.0, 2.0],
            kernel_sizes: vec![1, 3, 5, 7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sweep", rename_all = "lowercase")]
pub enum Sweep {
    Transform(TransformGrid),
    Blur(BlurGrid),
    /// Additive Gaussian noise from one seeded stream; cells are `(σ, 0)`.
    Noise { sigmas: Vec<f32>, seed: u64 },
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Transform(_) => "transform",
            Sweep::Blur(_) => "blur",
            Sweep::Noise { .. } => "noise",
        }
    }

    pub fn cells(&self) -> Result<Vec<(f32, f32)>> {
        let cells: Vec<(f32, f32)> = match self {
            Sweep::Transform(g) => g.a_values.iter().flat_map(|&a| g.b_values.iter().map(move |&b| (a, b))).collect(),
            Sweep::Blur(g) => {
                if let Some(k) = g.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
                    return Err(Error::Config(format!("blur kernel size must be odd, got {k}")));
                }
                g.sigmas
                    .iter()
                    .flat_map(|&s| g.kernel_sizes.iter().map(move |&k| (s, k as f32)))
                    .collect()
            }
            Sweep::Noise { sigmas, .. } => sigmas.iter().map(|&s| (s, 0.0)).collect(),
        };
        if cells.is_empty() {
            return Err(Error::Config(format!("empty {} grid", self.name())));
        }
        Ok(cells)
    }

    /// Perturbs `images` for one cell.
    pub fn apply(&self, images: &Tensor, cell: (f32, f32)) -> Result<Tensor> {
        match self {
            Sweep::Transform(g) => pixel_transform(images, cell.0, cell.1, g.clip),
            Sweep::Blur(_) => gaussian_blur(images, cell.0, cell.1 as usize),
            Sweep::Noise { seed, .. } => additive_noise(images, cell.0, *seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub a: f32,
    pub b: f32,
    pub top1: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Label written in the `kind` column, normally the model's similarity.
    pub kind: String,
    pub sweep: String,
    pub cells: Vec<Cell>,
}

pub const SWEEP_HEADER: &str = "kind,param_a_or_sigma,param_b_or_ksize,top1";
pub const DELTA_HEADER: &str = "param_a_or_sigma,param_b_or_ksize,delta_top1";

impl SweepResult {
    pub fn csv(&self) -> String {
        sweep_csv(std::slice::from_ref(self))
    }

    pub fn cell(&self, a: f32, b: f32) -> Option<&Cell> {
        self.cells.iter().find(|c| c.a == a && c.b == b)
    }
}

pub fn sweep_csv(results: &[SweepResult]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in results {
        for c in &r.cells {
            let _ = writeln!(s, "{},{},{},{}", r.kind, c.a, c.b, c.top1);
        }
    }
    s
}

/// Evaluates `score` on every perturbed copy of `data`; errors name the cell.
pub fn sweep_with(
    data: &Dataset,
    sweep: &Sweep,
    kind: &str,
    mut score: impl FnMut(&Dataset) -> Result<f32>,
) -> Result<SweepResult> {
    let mut cells = Vec::new();
    for (a, b) in sweep.cells()? {
        let mut cell = || -> Result<Cell> {
            let images = sweep.apply(&data.images, (a, b))?;
            let perturbed = Dataset {
                images,
                labels: data.labels.clone(),
                class_count: data.class_count,
            };
            Ok(Cell { a, b, top1: score(&perturbed)? })
        };
        cells.push(cell().map_err(|e| Error::AtCell {
            a,
            b,
            source: Box::new(e),
        })?);
    }
    Ok(SweepResult {
        kind: kind.to_string(),
        sweep: sweep.name().to_string(),
        cells,
    })
}

pub fn sweep_eval(model: &Model, data: &Dataset, sweep: &Sweep) -> Result<SweepResult> {
    let kind = model.kind().map_or("none".to_string(), |k| k.name().to_string());
    sweep_with(data, sweep, &kind, |d| Ok(evaluate(model, d)?.top1))
}

/// `first − second` per cell; both results must cover the same grid.
pub fn delta_grid(first: &SweepResult, second: &SweepResult) -> Result<Vec<Cell>> {
    if first.cells.len() != second.cells.len() {
        return Err(Error::Length {
            got: second.cells.len(),
            expected: first.cells.len(),
        });
    }
    first
        .cells
        .iter()
        .zip(&second.cells)
        .map(|(x, y)| {
            if (x.a, x.b) != (y.a, y.b) {
                return Err(Error::Shape(format!("grid cells differ: ({}, {}) vs ({}, {})", x.a, x.b, y.a, y.b)));
            }
            Ok(Cell {
                a: x.a,
                b: x.b,
                top1: x.top1 - y.top1,
            })
        })
        .collect()
}

pub fn delta_csv(cells: &[Cell]) -> String {
    let mut s = format!("{DELTA_HEADER}\n");
    for c in cells {
        let _ = writeln!(s, "{},{},{}", c.a, c.b, c.top1);
    }
    s
}

//! Procedurally rendered handwritten-style digits, used to build IDX
//! fixtures of arbitrary size without network access.
//!
//! Each class is a fixed stroke skeleton in a unit box. Every sample jitters
//! the control points, applies a random affine map (rotation, anisotropic
//! scale, shear, shift), varies stroke width, renders with an anti-aliased
//! distance field and adds pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::Result;
use crate::tensor::Tensor;

type Stroke = Vec<(f32, f32)>;

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, from_deg: f32, to_deg: f32, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f32 / steps as f32).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn skeleton(digit: u8) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.27, 0.4, 0.0, 360.0, 20)],
        1 => vec![vec![(0.35, 0.25), (0.52, 0.1), (0.52, 0.9)]],
        2 => vec![vec![
            (0.25, 0.3),
            (0.35, 0.13),
            (0.6, 0.1),
            (0.75, 0.25),
            (0.7, 0.45),
            (0.25, 0.9),
            (0.8, 0.9),
        ]],
        3 => vec![vec![
            (0.25, 0.15),
            (0.72, 0.15),
            (0.45, 0.45),
            (0.7, 0.58),
            (0.72, 0.8),
            (0.5, 0.9),
            (0.25, 0.84),
        ]],
        4 => vec![vec![(0.65, 0.9), (0.65, 0.1), (0.2, 0.65), (0.82, 0.65)]],
        5 => vec![vec![
            (0.75, 0.1),
            (0.32, 0.1),
            (0.28, 0.45),
            (0.58, 0.4),
            (0.75, 0.58),
            (0.7, 0.82),
            (0.5, 0.9),
            (0.25, 0.84),
        ]],
        6 => vec![vec![
            (0.7, 0.12),
            (0.42, 0.28),
            (0.28, 0.58),
            (0.33, 0.84),
            (0.55, 0.92),
            (0.72, 0.75),
            (0.64, 0.54),
            (0.4, 0.52),
            (0.29, 0.64),
        ]],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.42, 0.9)]],
        8 => vec![
            arc(0.5, 0.29, 0.18, 0.18, 0.0, 360.0, 16),
            arc(0.5, 0.69, 0.23, 0.22, 0.0, 360.0, 16),
        ],
        _ => vec![
            arc(0.48, 0.33, 0.21, 0.22, 0.0, 360.0, 16),
            vec![(0.69, 0.36), (0.62, 0.9)],
        ],
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one `size × size` sample of `digit` as u8 pixels.
pub fn render_digit(digit: u8, size: usize, rng: &mut impl Rng) -> Vec<u8> {
    let jitter = Normal::new(0.0f32, 0.025).expect("valid sigma");
    let noise = Normal::new(0.0f32, 0.04).expect("valid sigma");
    let angle = rng.random_range(-0.22f32..0.22);
    let (sx, sy) = (rng.random_range(0.75f32..1.05), rng.random_range(0.75f32..1.05));
    let shear = rng.random_range(-0.25f32..0.25);
    let (tx, ty) = (rng.random_range(-0.08f32..0.08), rng.random_range(-0.08f32..0.08));
    let thickness = rng.random_range(0.05f32..0.1);
    let (sin, cos) = angle.sin_cos();

    // glyph box [0,1]² maps onto the central 70% of the canvas
    let margin = 0.15;
    let strokes: Vec<Stroke> = skeleton(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + jitter.sample(rng) - 0.5, y + jitter.sample(rng) - 0.5);
                    let (x, y) = (sx * (x + shear * y), sy * y);
                    let (x, y) = (cos * x - sin * y, sin * x + cos * y);
                    (
                        margin + (1.0 - 2.0 * margin) * (x + 0.5 + tx),
                        margin + (1.0 - 2.0 * margin) * (y + 0.5 + ty),
                    )
                })
                .collect()
        })
        .collect();
    let half_width = thickness * (1.0 - 2.0 * margin) * 0.5;
    let pixel = 1.0 / size as f32;

    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let p = ((c as f32 + 0.5) * pixel, (r as f32 + 0.5) * pixel);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(|seg| segment_distance(p, seg[0], seg[1])))
                .fold(f32::INFINITY, f32::min);
            let ink = (1.0 - (d - half_width) / pixel).clamp(0.0, 1.0);
            let v = (ink + noise.sample(rng)).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// `n` samples with labels cycling 0..9; returns `(pixels, labels)`.
pub fn generate(n: usize, size: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = (i % 10) as u8;
        pixels.extend(render_digit(digit, size, &mut rng));
        labels.push(digit);
    }
    (pixels, labels)
}

pub fn dataset(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    let (pixels, labels) = generate(n, size, seed);
    let images = Tensor::new(
        &[n, 1, size, size],
        pixels.iter().map(|&p| p as f32 / 255.0).collect::<Vec<_>>(),
    )?;
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), 10)
}

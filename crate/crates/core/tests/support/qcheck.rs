//! Integer Euclid kernel against the exactly rounded value of the float
//! Euclid convolution of the dequantised operands.
#![allow(dead_code)]

use euclidnet::quant::{build_square_lut, qeuclid_conv2d, QTensor, QuantParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `−½·Σ(s·qx − s·qw)²` rounded once to f32. With `s = m·2^e` the sum is
/// `m²·Σd²·2^(2e)`, an integer times a power of two, so it is formed in u128
/// and rounded by a single int→float conversion.
pub fn exact_euclid(scale: f32, diffs: impl IntoIterator<Item = i32>) -> f32 {
    let bits = scale.to_bits();
    let (exp_bits, frac) = ((bits >> 23) & 0xff, bits & 0x7f_ffff);
    let (m, e) = if exp_bits == 0 { (frac, -149) } else { (frac | 0x80_0000, exp_bits as i32 - 150) };
    let sum: u128 = diffs.into_iter().map(|d| (d as i64 * d as i64) as u128).sum();
    let mant = (m as u128 * m as u128 * sum) as f32;
    -(mant as f64 * 2f64.powi(2 * e - 1)) as f32
}

/// Direct loop-nest reference over `[N, C, H, W]` and `[O, C, K, K]` integers.
pub fn reference(qx: &QTensor, qw: &QTensor, stride: usize, pad: usize) -> Vec<f32> {
    let (&[n, c, h, w], &[o, _, k, _]) = (qx.shape(), qw.shape()) else { panic!("rank") };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let (xs, ws) = (qx.data(), qw.data());
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for s in 0..n {
        for l in 0..o {
            for r in 0..oh {
                for q in 0..ow {
                    let mut diffs = Vec::new();
                    for ch in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let (y, z) = ((r * stride + i) as isize - pad as isize, (q * stride + j) as isize - pad as isize);
                                let xv = if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                                    0
                                } else {
                                    xs[((s * c + ch) * h + y as usize) * w + z as usize] as i32
                                };
                                diffs.push(xv - ws[((l * c + ch) * k + i) * k + j] as i32);
                            }
                        }
                    }
                    out.push(exact_euclid(qx.params.scale, diffs));
                }
            }
        }
    }
    out
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Tally {
    pub compared: usize,
    pub mismatched: usize,
}

/// Every ordered pair of 8-bit values as a 1×1 convolution, at a few scales.
pub fn exhaustive_pairs(scales: &[f32]) -> Tally {
    let lut = build_square_lut(8).unwrap();
    let all: Vec<i8> = (i8::MIN..=i8::MAX).collect();
    let mut t = Tally::default();
    for &s in scales {
        let p = QuantParams::new(s, 8).unwrap();
        let qx = QTensor::new(&[256, 1, 1, 1], all.clone(), p).unwrap();
        let qw = QTensor::new(&[256, 1, 1, 1], all.clone(), p).unwrap();
        let y = qeuclid_conv2d(&qx, &qw, &lut, 1, 0).unwrap();
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                let want = exact_euclid(s, [*a as i32 - *b as i32]);
                t.compared += 1;
                t.mismatched += usize::from(y.data()[i * 256 + j].to_bits() != want.to_bits());
            }
        }
    }
    t
}

/// `cases` random small convolutions over the full 8-bit range.
pub fn random_convs(cases: usize, seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lut = build_square_lut(8).unwrap();
    let mut t = Tally::default();
    for _ in 0..cases {
        let (n, c, o) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (h, w) = (rng.random_range(k..=9), rng.random_range(k..=9));
        let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=k / 2));
        let scale = rng.random_range(1e-3f32..2.0);
        let p = QuantParams::new(scale, 8).unwrap();
        let mut ints = |len: usize| (0..len).map(|_| rng.random_range(i8::MIN..=i8::MAX)).collect::<Vec<_>>();
        let qx = QTensor::new(&[n, c, h, w], ints(n * c * h * w), p).unwrap();
        let qw = QTensor::new(&[o, c, k, k], ints(o * c * k * k), p).unwrap();
        let y = qeuclid_conv2d(&qx, &qw, &lut, stride, pad).unwrap();
        let want = reference(&qx, &qw, stride, pad);
        t.compared += want.len();
        t.mismatched += y.data().iter().zip(&want).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    t
}

/// Entries of the 8-bit table that differ from `d²`.
pub fn lut_mismatches() -> (usize, usize) {
    let lut = build_square_lut(8).unwrap();
    let bad = (-255..=255).filter(|&d: &i32| lut.get(d) as i64 != (d as i64) * (d as i64)).count();
    (lut.len(), bad)
}

//! Scalar similarity measures that stand in for the multiply inside
//! convolution, their gradients, and the homotopy schedule that moves a
//! network from `xw` to `-(x-w)²/2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "lambda", rename_all = "lowercase")]
pub enum SimilarityKind {
    /// `x·w`
    Conv,
    /// `-(x-w)²/2`
    Euclid,
    /// `-|x-w|`
    Adder,
    /// `sign(x)·sign(w)·(|x|+|w|)`
    Mfo,
    /// `sign(x)·sign(w)·min(|x|,|w|)`
    Synapse,
    /// `x·w - λ(x²+w²)/2`, λ ∈ [0, 1]
    Homotopy(f32),
}

impl SimilarityKind {
    pub fn homotopy(lambda: f32) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(SimilarityKind::Homotopy(lambda))
    }

    pub fn validate(self) -> Result<Self> {
        if let SimilarityKind::Homotopy(l) = self {
            check_lambda(l)?;
        }
        Ok(self)
    }

    /// Collapses the homotopy endpoints onto the kinds they coincide with, so
    /// that λ=0 and λ=1 share code (and bits) with Conv and Euclid.
    #[inline]
    pub fn resolve(self) -> Self {
        match self {
            SimilarityKind::Homotopy(l) if l == 0.0 => SimilarityKind::Conv,
            SimilarityKind::Homotopy(l) if l == 1.0 => SimilarityKind::Euclid,
            k => k,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Conv => "conv",
            SimilarityKind::Euclid => "euclid",
            SimilarityKind::Adder => "adder",
            SimilarityKind::Mfo => "mfo",
            SimilarityKind::Synapse => "synapse",
            SimilarityKind::Homotopy(_) => "homotopy",
        }
    }

    pub fn lambda(self) -> f32 {
        match self {
            SimilarityKind::Homotopy(l) => l,
            SimilarityKind::Euclid => 1.0,
            _ => 0.0,
        }
    }

    /// True for kinds whose gradient is defined everywhere.
    pub fn is_smooth(self) -> bool {
        matches!(
            self,
            SimilarityKind::Conv | SimilarityKind::Euclid | SimilarityKind::Homotopy(_)
        )
    }

    /// Unchecked scalar evaluation used by the layer kernels.
    #[inline(always)]
    pub fn apply(self, x: f32, w: f32) -> f32 {
        match self {
            SimilarityKind::Conv => x * w,
            SimilarityKind::Euclid => {
                let d = x - w;
                -0.5 * (d * d)
            }
            SimilarityKind::Adder => -(x - w).abs(),
            SimilarityKind::Mfo => sign(x) * sign(w) * (x.abs() + w.abs()),
            SimilarityKind::Synapse => sign(x) * sign(w) * x.abs().min(w.abs()),
            SimilarityKind::Homotopy(l) => x * w - l * ((x * x + w * w) * 0.5),
        }
    }

    /// Evaluation of f32 operands in double precision.
    pub fn apply_wide(self, x: f32, w: f32) -> f64 {
        let (x, w) = (x as f64, w as f64);
        let sign = |v: f64| if v == 0.0 { 0.0 } else { v.signum() };
        match self {
            SimilarityKind::Conv => x * w,
            SimilarityKind::Euclid => -0.5 * (x - w) * (x - w),
            SimilarityKind::Adder => -(x - w).abs(),
            SimilarityKind::Mfo => sign(x) * sign(w) * (x.abs() + w.abs()),
            SimilarityKind::Synapse => sign(x) * sign(w) * x.abs().min(w.abs()),
            SimilarityKind::Homotopy(l) => x * w - l as f64 * ((x * x + w * w) * 0.5),
        }
    }

    /// Unchecked `(∂S/∂x, ∂S/∂w)`.
    #[inline(always)]
    pub fn grad(self, x: f32, w: f32, adder: AdderGradient) -> (f32, f32) {
        match self {
            SimilarityKind::Conv => (w, x),
            SimilarityKind::Euclid => (w - x, x - w),
            SimilarityKind::Homotopy(l) => (w - l * x, x - l * w),
            SimilarityKind::Adder => match adder {
                AdderGradient::Clipped => ((w - x).clamp(-1.0, 1.0), (x - w).clamp(-1.0, 1.0)),
                AdderGradient::Sign => (sign(w - x), sign(x - w)),
            },
            SimilarityKind::Mfo => (sign(w), sign(x)),
            SimilarityKind::Synapse => {
                let (ax, aw) = (x.abs(), w.abs());
                (
                    if ax < aw { sign(w) } else { 0.0 },
                    if aw < ax { sign(x) } else { 0.0 },
                )
            }
        }
    }
}

fn check_lambda(l: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::Range {
            what: "lambda",
            value: l as f64,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimilarityKind::Homotopy(l) => write!(f, "homotopy({l})"),
            k => f.write_str(k.name()),
        }
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "conv" => SimilarityKind::Conv,
            "euclid" => SimilarityKind::Euclid,
            "adder" => SimilarityKind::Adder,
            "mfo" => SimilarityKind::Mfo,
            "synapse" => SimilarityKind::Synapse,
            "homotopy" => SimilarityKind::Homotopy(0.0),
            other => {
                if let Some(inner) = other
                    .strip_prefix("homotopy(")
                    .and_then(|r| r.strip_suffix(')'))
                {
                    let l: f32 = inner
                        .parse()
                        .map_err(|_| Error::Config(format!("bad lambda in {s:?}")))?;
                    SimilarityKind::homotopy(l)?
                } else {
                    return Err(Error::Config(format!("unknown similarity kind {s:?}")));
                }
            }
        })
    }
}

/// Backward rule for the ℓ1 similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdderGradient {
    /// HardTanh-clipped difference, as used for training adder networks.
    #[default]
    Clipped,
    /// Exact derivative away from the kink.
    Sign,
}

/// `sign(0) = 0`.
#[inline(always)]
pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite(x: f32, w: f32) -> Result<()> {
    if !x.is_finite() || !w.is_finite() {
        return Err(Error::NonFinite(format!("similarity operands ({x}, {w})")));
    }
    Ok(())
}

pub fn sim_eval(kind: SimilarityKind, x: f32, w: f32) -> Result<f32> {
    check_finite(x, w)?;
    Ok(kind.validate()?.resolve().apply(x, w))
}

/// `(∂S/∂x, ∂S/∂w)` with the default (clipped) adder rule.
pub fn sim_grad(kind: SimilarityKind, x: f32, w: f32) -> Result<(f32, f32)> {
    sim_grad_with(kind, x, w, AdderGradient::default())
}

pub fn sim_grad_with(
    kind: SimilarityKind,
    x: f32,
    w: f32,
    adder: AdderGradient,
) -> Result<(f32, f32)> {
    check_finite(x, w)?;
    Ok(kind.validate()?.resolve().grad(x, w, adder))
}

/// Linear λ ramp from `lambda0` to exactly 1 over `epochs` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomotopySchedule {
    lambda0: f32,
    epochs: u32,
}

impl HomotopySchedule {
    pub const DEFAULT_LAMBDA0: f32 = 0.1;

    pub fn new(lambda0: f32, epochs: u32) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0 < 1.0) {
            return Err(Error::Config(format!(
                "lambda0 must lie strictly inside (0, 1), got {lambda0}"
            )));
        }
        if epochs == 0 {
            return Err(Error::Config("homotopy epochs must be ≥ 1".into()));
        }
        Ok(HomotopySchedule { lambda0, epochs })
    }

    pub fn lambda0(&self) -> f32 {
        self.lambda0
    }

    pub fn epochs(&self) -> u32 {
        self.epochs
    }

    /// λ for every k in `0..=n`.
    pub fn trace(&self) -> Vec<f32> {
        (0..=self.epochs)
            .map(|k| lambda_at(self, k).expect("k within schedule"))
            .collect()
    }
}

pub fn lambda_at(sched: &HomotopySchedule, k: u32) -> Result<f32> {
    let n = sched.epochs;
    if k > n {
        return Err(Error::Range {
            what: "homotopy step",
            value: k as f64,
            lo: 0.0,
            hi: n as f64,
        });
    }
    if k == n {
        return Ok(1.0);
    }
    let l0 = sched.lambda0;
    Ok((l0 + (1.0 - l0) * k as f32 / n as f32).clamp(l0, 1.0))
}

pub fn cosine_similarity(x: &[f32], w: &[f32]) -> Result<f32> {
    if x.len() != w.len() {
        return Err(Error::Length {
            got: w.len(),
            expected: x.len(),
        });
    }
    let dot: f32 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f32>().sqrt();
    let nw = w.iter().map(|a| a * a).sum::<f32>().sqrt();
    if nx == 0.0 || nw == 0.0 {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
    }
    Ok(dot / (nx * nw))
}

/// `Σᵢ S(xᵢ, wᵢ)` over paired vectors.
pub fn sim_sum(kind: SimilarityKind, x: &[f32], w: &[f32]) -> Result<f32> {
    if x.len() != w.len() {
        return Err(Error::Length {
            got: w.len(),
            expected: x.len(),
        });
    }
    x.iter().zip(w).map(|(&a, &b)| sim_eval(kind, a, b)).sum()
}

//! Multiplier-count model for divide-and-conquer multiplication and squaring.
//!
//! An `n`-bit operand is split as `a = a₁·2^t + a₂` until the halves fit an
//! `m`-bit multiplier. A general product costs four half-width products and
//! three additions per level; a square costs two half-width squares, one
//! half-width product and two additions. Shifts are free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tiling {
    /// Four sub-products per level.
    #[default]
    FourWay,
    /// Karatsuba: three sub-products and six additions per level. The middle
    /// product operates on `t+1`-bit sums; the model ignores that extra bit.
    Karatsuba,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_bits: u32,
    pub m_bits: u32,
    pub mults: u64,
    pub adds: u64,
    pub depth: u32,
}

impl CostReport {
    fn base(n: u32, m: u32) -> Self {
        CostReport {
            n_bits: n,
            m_bits: m,
            mults: 1,
            adds: 0,
            depth: 0,
        }
    }

    pub fn scaled(self, k: u64) -> Self {
        CostReport {
            mults: self.mults * k,
            adds: self.adds * k,
            ..self
        }
    }
}

/// Number of halvings from `n` down to `m`.
fn levels(n: u32, m: u32) -> Result<u32> {
    if m == 0 || n < m || n % m != 0 || !(n / m).is_power_of_two() {
        return Err(Error::Tiling { n, m });
    }
    Ok((n / m).trailing_zeros())
}

fn mult_rec(k: u32, tiling: Tiling) -> (u64, u64) {
    if k == 0 {
        return (1, 0);
    }
    let (m, a) = mult_rec(k - 1, tiling);
    match tiling {
        Tiling::FourWay => (4 * m, 4 * a + 3),
        Tiling::Karatsuba => (3 * m, 3 * a + 6),
    }
}

fn square_rec(k: u32, tiling: Tiling) -> (u64, u64) {
    if k == 0 {
        return (1, 0);
    }
    let (sm, sa) = square_rec(k - 1, tiling);
    let (mm, ma) = mult_rec(k - 1, tiling);
    (2 * sm + mm, 2 * sa + ma + 2)
}

pub fn mult_cost(n: u32, m: u32) -> Result<CostReport> {
    mult_cost_with(n, m, Tiling::FourWay)
}

pub fn mult_cost_with(n: u32, m: u32, tiling: Tiling) -> Result<CostReport> {
    let k = levels(n, m)?;
    let (mults, adds) = mult_rec(k, tiling);
    Ok(CostReport {
        mults,
        adds,
        depth: k,
        ..CostReport::base(n, m)
    })
}

pub fn square_cost(n: u32, m: u32) -> Result<CostReport> {
    square_cost_with(n, m, Tiling::FourWay)
}

pub fn square_cost_with(n: u32, m: u32, tiling: Tiling) -> Result<CostReport> {
    let k = levels(n, m)?;
    let (mults, adds) = square_rec(k, tiling);
    Ok(CostReport {
        mults,
        adds,
        depth: k,
        ..CostReport::base(n, m)
    })
}

/// Per-MAC cost of the product similarity against the squared-difference
/// similarity (one subtraction plus one square), totalled over `macs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n: u32,
    pub m: u32,
    pub macs: u64,
    pub tiling: Tiling,
    pub conv: CostReport,
    pub euclid: CostReport,
    /// Multiplier uses of a square over those of a product.
    pub ratio: f64,
    /// Entries of a table holding every squared difference of two `n`-bit
    /// symmetric integers.
    pub lut_entries: u64,
}

pub fn euclid_vs_conv_report(n: u32, m: u32, macs: u64, tiling: Tiling) -> Result<Comparison> {
    if macs == 0 {
        return Err(Error::Config("mac count must be ≥ 1".into()));
    }
    let mult = mult_cost_with(n, m, tiling)?;
    let square = square_cost_with(n, m, tiling)?;
    let euclid = CostReport {
        adds: square.adds + 1,
        ..square
    };
    Ok(Comparison {
        n,
        m,
        macs,
        tiling,
        conv: mult.scaled(macs),
        euclid: euclid.scaled(macs),
        ratio: square.mults as f64 / mult.mults as f64,
        lut_entries: if n < 63 { (1u64 << (n + 1)) - 1 } else { u64::MAX },
    })
}

impl Comparison {
    /// `mult: 4 mults 3 adds; square: 3 mults 2 adds; ratio 0.75` (per operation).
    pub fn summary_line(&self) -> String {
        let per = |r: CostReport| (r.mults / self.macs, r.adds / self.macs);
        let (mm, ma) = per(self.conv);
        let (sm, sa) = per(self.euclid);
        format!(
            "mult: {mm} mults {ma} adds; square: {sm} mults {} adds; ratio {}",
            sa - 1,
            self.ratio
        )
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {} bits, m = {} bits, {} MACs, tiling {:?}", self.n, self.m, self.macs, self.tiling);
        let _ = writeln!(s, "{:<8} {:>14} {:>14} {:>6}", "", "mults", "adds", "depth");
        for (name, r) in [("conv", self.conv), ("euclid", self.euclid)] {
            let _ = writeln!(s, "{:<8} {:>14} {:>14} {:>6}", name, r.mults, r.adds, r.depth);
        }
        let _ = writeln!(s, "multiplier ratio (square / multiply): {}", self.ratio);
        let _ = writeln!(s, "square table entries for {}-bit differences: {}", self.n, self.lut_entries);
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n,
            "m": self.m,
            "macs": self.macs,
            "conv": self.conv,
            "euclid": self.euclid,
            "ratio": self.ratio,
            "lut_entries": self.lut_entries,
        })
    }
}

/// Operation tally of an executed tiled circuit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub mults: u64,
    pub adds: u64,
}

fn primitive(a: u64, b: u64, m: u32, tally: &mut Tally) -> u64 {
    debug_assert!(a >> m == 0 && b >> m == 0, "operand exceeds the {m}-bit multiplier");
    tally.mults += 1;
    a * b
}

/// `a·b` for `n`-bit `a, b` using only `m`-bit products.
pub fn tiled_mult(a: u64, b: u64, n: u32, m: u32, tally: &mut Tally) -> u64 {
    if n == m {
        return primitive(a, b, m, tally);
    }
    let t = n / 2;
    let mask = (1u64 << t) - 1;
    let (a1, a2, b1, b2) = (a >> t, a & mask, b >> t, b & mask);
    let hi = tiled_mult(a1, b1, t, m, tally);
    let x = tiled_mult(a1, b2, t, m, tally);
    let y = tiled_mult(a2, b1, t, m, tally);
    let lo = tiled_mult(a2, b2, t, m, tally);
    tally.adds += 3;
    (hi << (2 * t)) + ((x + y) << t) + lo
}

/// `a²` for `n`-bit `a`; the cross term is `a₁a₂·2^(t+1)`.
pub fn tiled_square(a: u64, n: u32, m: u32, tally: &mut Tally) -> u64 {
    if n == m {
        return primitive(a, a, m, tally);
    }
    let t = n / 2;
    let (a1, a2) = (a >> t, a & ((1u64 << t) - 1));
    let hi = tiled_square(a1, t, m, tally);
    let cross = tiled_mult(a1, a2, t, m, tally);
    let lo = tiled_square(a2, t, m, tally);
    tally.adds += 2;
    (hi << (2 * t)) + (cross << (t + 1)) + lo
}

/// Exhaustively checks the tiled product and square against native
/// arithmetic for every `n`-bit unsigned operand pair, and that the executed
/// operation counts match the cost model.
pub fn bitexact_tiling_check(n: u32, m: u32) -> Result<bool> {
    levels(n, m)?;
    if n > 16 {
        return Err(Error::Config(format!("exhaustive check limited to n ≤ 16, got {n}")));
    }
    let mc = mult_cost(n, m)?;
    let sc = square_cost(n, m)?;
    let top = 1u64 << n;
    for a in 0..top {
        let mut t = Tally::default();
        if tiled_square(a, n, m, &mut t) != a * a || (t.mults, t.adds) != (sc.mults, sc.adds) {
            return Ok(false);
        }
        for b in 0..top {
            let mut t = Tally::default();
            if tiled_mult(a, b, n, m, &mut t) != a * b || (t.mults, t.adds) != (mc.mults, mc.adds) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

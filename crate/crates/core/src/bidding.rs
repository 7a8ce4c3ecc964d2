//! Randomized bidding strategies that implement allocations in expectation.
//!
//! A strategy wins an impression at external price `p` exactly when its bid
//! exceeds `p`, so the fraction of supply won at price `p` is `P(bid > p)`.
//! Setting `P(bid > p) = a(p)/s` implements any non-increasing allocation.
//! Several contracts bidding independently implement their allocations when
//! their bid CDFs multiply to `1 − A(p)/s`; [`decentralize`] builds such CDFs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{Allocation, AllocationForm, Knot};
use crate::error::{Error, Result};

/// Segment of a decentralized bid CDF.
///
/// On `[lo, hi)` the residual supply `g` is linear from `g_lo` to `g_hi` and
/// `H(p) = h_hi · (g(p)/g_hi)^exponent`. A piece with `lo == hi` is a jump of
/// `H` from `h_lo` to `h_hi` at that price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerPiece {
    pub lo: f64,
    pub hi: f64,
    pub h_lo: f64,
    pub h_hi: f64,
    pub g_lo: f64,
    pub g_hi: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum BidStrategy {
    /// Bid with probability `bid_probability`, uniformly on `[lo, hi]`.
    UniformMixture { lo: f64, hi: f64, bid_probability: f64 },
    /// Bid with probability `bid_probability`, at `p0` plus an exponential with rate `lambda`.
    ExponentialTail { p0: f64, lambda: f64, bid_probability: f64 },
    /// Bid with probability `bid_probability` above every possible price.
    AlwaysWin { bid_probability: f64 },
    /// `(price, P(bid > price))` knots, linearly interpolated.
    Tabulated { points: Vec<[f64; 2]> },
    /// Bid CDF built piecewise by [`decentralize`].
    Decentralized { pieces: Vec<PowerPiece> },
}

impl BidStrategy {
    pub fn bid_probability(&self) -> f64 {
        match self {
            BidStrategy::UniformMixture { bid_probability, .. }
            | BidStrategy::ExponentialTail { bid_probability, .. }
            | BidStrategy::AlwaysWin { bid_probability } => *bid_probability,
            _ => self.win_fraction(0.0),
        }
    }

    /// `P(bid > p)`: the fraction of supply at price `p` this strategy wins.
    pub fn win_fraction(&self, p: f64) -> f64 {
        match self {
            BidStrategy::UniformMixture {
                lo,
                hi,
                bid_probability,
            } => {
                if p < *lo {
                    *bid_probability
                } else if p >= *hi {
                    0.0
                } else {
                    bid_probability * (hi - p) / (hi - lo)
                }
            }
            BidStrategy::ExponentialTail {
                p0,
                lambda,
                bid_probability,
            } => {
                if p < *p0 {
                    *bid_probability
                } else {
                    bid_probability * (-lambda * (p - p0)).exp()
                }
            }
            BidStrategy::AlwaysWin { bid_probability } => *bid_probability,
            BidStrategy::Tabulated { points } => crate::allocation::tabulated_value(points, p),
            BidStrategy::Decentralized { pieces } => 1.0 - power_cdf(pieces, p),
        }
    }

    /// Unconditional bid CDF `H(p) = 1 − P(bid > p)`, with "no bid" counted below every price.
    pub fn cdf(&self, p: f64) -> f64 {
        1.0 - self.win_fraction(p)
    }

    /// Draws a bid; `None` means the strategy sits out this auction.
    pub fn sample_bid<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        match self {
            BidStrategy::UniformMixture {
                lo,
                hi,
                bid_probability,
            } => {
                if rng.random::<f64>() >= *bid_probability {
                    return None;
                }
                let u: f64 = rng.random();
                Some(lo + u * (hi - lo))
            }
            BidStrategy::ExponentialTail {
                p0,
                lambda,
                bid_probability,
            } => {
                if rng.random::<f64>() >= *bid_probability {
                    return None;
                }
                let u: f64 = rng.random();
                Some(p0 - (-u).ln_1p() / lambda)
            }
            BidStrategy::AlwaysWin { bid_probability } => {
                if rng.random::<f64>() >= *bid_probability {
                    None
                } else {
                    Some(f64::INFINITY)
                }
            }
            BidStrategy::Tabulated { points } => {
                let u: f64 = rng.random();
                invert_tabulated(points, u)
            }
            BidStrategy::Decentralized { pieces } => {
                let u: f64 = rng.random();
                invert_power(pieces, u)
            }
        }
    }
}

/// Uniform-mixture strategy for the linear allocation `min{1, z (p_max − p)}`.
pub fn l2_strategy(z: f64, p_max: f64) -> BidStrategy {
    BidStrategy::UniformMixture {
        lo: (p_max - 1.0 / z).max(0.0),
        hi: p_max,
        bid_probability: (z * p_max).min(1.0),
    }
}

/// Single-contract strategy with `P(bid > p) = a(p)/s`.
pub fn strategy_from_allocation(allocation: &Allocation) -> Result<BidStrategy> {
    allocation.validate()?;
    Ok(match &allocation.form {
        AllocationForm::Flat { level } => BidStrategy::AlwaysWin {
            bid_probability: *level,
        },
        AllocationForm::L2Linear { z, p_max } => l2_strategy(*z, *p_max),
        AllocationForm::L2Saturated { p_min, p_max } => BidStrategy::UniformMixture {
            lo: *p_min,
            hi: *p_max,
            bid_probability: 1.0,
        },
        AllocationForm::KlExponential { p0, lambda } => BidStrategy::ExponentialTail {
            p0: *p0,
            lambda: *lambda,
            bid_probability: 1.0,
        },
        AllocationForm::KlUnsaturated { scale, lambda } => {
            if *lambda == 0.0 {
                BidStrategy::AlwaysWin {
                    bid_probability: scale.min(1.0),
                }
            } else if *scale > 1.0 {
                BidStrategy::ExponentialTail {
                    p0: scale.ln() / lambda,
                    lambda: *lambda,
                    bid_probability: 1.0,
                }
            } else {
                BidStrategy::ExponentialTail {
                    p0: 0.0,
                    lambda: *lambda,
                    bid_probability: *scale,
                }
            }
        }
        AllocationForm::Tabulated { points } => BidStrategy::Tabulated {
            points: points.clone(),
        },
    })
}

fn invert_tabulated(points: &[[f64; 2]], u: f64) -> Option<f64> {
    let first = points.first()?;
    if !(u < first[1]) {
        return None;
    }
    // First knot whose win fraction has fallen to u or below.
    let j = points.partition_point(|pt| pt[1] > u);
    if j >= points.len() {
        return Some(f64::INFINITY);
    }
    if j == 0 {
        return Some(first[0]);
    }
    let (a, b) = (points[j - 1], points[j]);
    if b[0] == a[0] {
        return Some(a[0]);
    }
    Some(a[0] + (a[1] - u) / (a[1] - b[1]) * (b[0] - a[0]))
}

fn power_cdf(pieces: &[PowerPiece], p: f64) -> f64 {
    let i = pieces.partition_point(|pc| pc.hi <= p);
    let Some(pc) = pieces.get(i) else {
        return 1.0;
    };
    if p < pc.lo {
        return pc.h_lo;
    }
    if pc.exponent == 0.0 || pc.h_hi == 0.0 {
        return if pc.exponent == 0.0 { pc.h_hi } else { 0.0 };
    }
    let g = pc.g_lo + (pc.g_hi - pc.g_lo) * (p - pc.lo) / (pc.hi - pc.lo);
    pc.h_hi * (g.max(0.0) / pc.g_hi).powf(pc.exponent)
}

fn invert_power(pieces: &[PowerPiece], u: f64) -> Option<f64> {
    if u < power_cdf(pieces, 0.0) {
        return None;
    }
    let i = pieces.partition_point(|pc| pc.h_hi <= u);
    let Some(pc) = pieces.get(i) else {
        return Some(f64::INFINITY);
    };
    if pc.hi == pc.lo || u < pc.h_lo {
        return Some(pc.lo);
    }
    let g = pc.g_hi * (u / pc.h_hi).powf(1.0 / pc.exponent);
    let frac = ((g - pc.g_lo) / (pc.g_hi - pc.g_lo)).clamp(0.0, 1.0);
    Some(pc.lo + frac * (pc.hi - pc.lo))
}

/// Right and left limits of a knot list at `x`.
fn knot_limits(knots: &[Knot], x: f64) -> (f64, f64) {
    let i = knots.partition_point(|k| k.x < x);
    if let Some(k) = knots.get(i) {
        if k.x == x {
            return (k.left, k.right);
        }
    }
    let v = if i == 0 {
        knots[0].left
    } else if i >= knots.len() {
        knots[knots.len() - 1].right
    } else {
        let (a, b) = (knots[i - 1], knots[i]);
        a.right + (b.left - a.right) * (x - a.x) / (b.x - a.x)
    };
    (v, v)
}

/// Independent bid distributions whose joint competition reproduces each
/// allocation: contract `j` wins fraction `a_j(p)/s` of the supply at price `p`.
///
/// Allocations are linearized (exactly for L2 forms) on `[0, 2·horizon]`; pass
/// the landscape's `support_hi` so that tails ramped to zero beyond it carry no mass.
pub fn decentralize(allocations: &[Allocation], horizon: f64) -> Result<Vec<BidStrategy>> {
    if allocations.is_empty() {
        return Ok(vec![]);
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid("horizon", "must be positive and finite"));
    }
    let supply = allocations[0].supply;
    for a in allocations {
        a.validate()?;
        if a.supply != supply {
            return Err(Error::invalid("allocations", "contracts must share one supply"));
        }
    }
    let horizon = allocations
        .iter()
        .flat_map(|a| a.breakpoints())
        .fold(horizon, f64::max);
    let knots: Vec<Vec<Knot>> = allocations.iter().map(|a| a.knots(horizon)).collect();
    let mut xs: Vec<f64> = knots.iter().flatten().map(|k| k.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let m = allocations.len();
    let n = xs.len();
    // left[i][j], right[i][j]: limits of a_j/s at xs[i].
    let mut left = vec![vec![0.0; m]; n];
    let mut right = vec![vec![0.0; m]; n];
    for (j, kn) in knots.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            let (l, r) = knot_limits(kn, x);
            left[i][j] = l;
            right[i][j] = r;
        }
    }
    let total = |row: &[f64]| row.iter().sum::<f64>();
    for i in 0..n {
        for (row, x) in [(&left[i], xs[i]), (&right[i], xs[i])] {
            let a = total(row);
            if a > 1.0 + 1e-9 {
                return Err(Error::ExceedsSupply { at: x, total: a });
            }
        }
        for j in 0..m {
            if right[i][j] > left[i][j] + 1e-12 || (i + 1 < n && left[i + 1][j] > right[i][j] + 1e-12) {
                return Err(Error::IncreasingAllocation { at: xs[i] });
            }
        }
    }

    let residual = |row: &[f64]| (1.0 - total(row)).max(0.0);
    let mut h = vec![1.0f64; m];
    let mut pieces: Vec<Vec<PowerPiece>> = vec![Vec::new(); m];
    // Walks the knots from the right: H = 1 where nothing is allocated.
    for i in (0..n).rev() {
        // Jump at xs[i].
        let drops: Vec<f64> = (0..m).map(|j| (left[i][j] - right[i][j]).max(0.0)).collect();
        let b: f64 = drops.iter().sum();
        if b > 0.0 {
            let (g_l, g_r) = (residual(&left[i]), residual(&right[i]));
            let ratio = if g_r > 0.0 { g_l / g_r } else { 0.0 };
            for j in 0..m {
                let e = drops[j] / b;
                let below = h[j] * ratio.powf(e);
                pieces[j].push(PowerPiece {
                    lo: xs[i],
                    hi: xs[i],
                    h_lo: below,
                    h_hi: h[j],
                    g_lo: g_l,
                    g_hi: g_r,
                    exponent: e,
                });
                h[j] = below;
            }
        }
        if i == 0 {
            break;
        }
        // Linear segment [xs[i-1], xs[i]].
        let drops: Vec<f64> = (0..m).map(|j| (right[i - 1][j] - left[i][j]).max(0.0)).collect();
        let b: f64 = drops.iter().sum();
        let (g_lo, g_hi) = (residual(&right[i - 1]), residual(&left[i]));
        let ratio = if g_hi > 0.0 { g_lo / g_hi } else { 0.0 };
        for j in 0..m {
            let e = if b > 0.0 { drops[j] / b } else { 0.0 };
            let below = h[j] * ratio.powf(e);
            pieces[j].push(PowerPiece {
                lo: xs[i - 1],
                hi: xs[i],
                h_lo: below,
                h_hi: h[j],
                g_lo,
                g_hi,
                exponent: e,
            });
            h[j] = below;
        }
    }
    Ok(pieces
        .into_iter()
        .map(|mut p| {
            p.reverse();
            BidStrategy::Decentralized { pieces: p }
        })
        .collect())
}

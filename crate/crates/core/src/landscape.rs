//! Bid landscapes: the distribution of the highest external bid per impression.
//!
//! Every solver in the crate touches the landscape only through `cdf`, `quantile`,
//! partial moments `∫_lo^hi p^k f(p) dp` and exponentially tilted moments. The
//! analytic families have closed forms for all of these; the empirical landscape
//! is piecewise uniform between order statistics and is integrated exactly per
//! segment.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::quadrature::{integrate_with, Tolerance};

/// Upper-tail mass cut off when an unbounded support is truncated for quadrature.
pub const TAIL_MASS: f64 = 1e-12;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Quantile levels used to split quadrature ranges on unbounded landscapes.
const QUANTILE_BREAKS: [f64; 13] = [
    1e-9, 1e-6, 1e-3, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999_9, 1.0 - 1e-7,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LandscapeKind {
    Lognormal { mu: f64, sigma: f64 },
    Exponential { gamma: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Sorted sample prices.
    Empirical { samples: Vec<f64> },
}

/// Cumulative moments of the empirical landscape at each order statistic.
#[derive(Debug, Clone, PartialEq)]
struct EmpiricalTables {
    cum: [Vec<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LandscapeKind", into = "LandscapeKind")]
pub struct Landscape {
    kind: LandscapeKind,
    support_hi: f64,
    degenerate: bool,
    tables: Option<EmpiricalTables>,
}

impl From<Landscape> for LandscapeKind {
    fn from(l: Landscape) -> Self {
        l.kind
    }
}

impl TryFrom<LandscapeKind> for Landscape {
    type Error = Error;

    fn try_from(kind: LandscapeKind) -> Result<Self> {
        match kind {
            LandscapeKind::Lognormal { mu, sigma } => Landscape::lognormal(mu, sigma),
            LandscapeKind::Exponential { gamma } => Landscape::exponential(gamma),
            LandscapeKind::Uniform { lo, hi } => Landscape::uniform(lo, hi),
            LandscapeKind::Empirical { samples } => Landscape::fit_empirical(&samples),
        }
    }
}

/// `∫_lo^hi p^k f(p) dp` over a window, as returned by [`Landscape::partial_moment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartialMoment {
    pub lo: f64,
    pub hi: f64,
    pub order: u32,
    pub value: f64,
}

fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        0.0
    } else if x == f64::INFINITY {
        1.0
    } else {
        0.5 * erfc(-x / SQRT_2)
    }
}

/// `Φ(b) − Φ(a)` without cancellation in either tail.
fn std_normal_mass(a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let upper_tail = |x: f64| {
        if x == f64::INFINITY {
            0.0
        } else if x == f64::NEG_INFINITY {
            1.0
        } else {
            0.5 * erfc(x / SQRT_2)
        }
    };
    if a >= 0.0 {
        upper_tail(a) - upper_tail(b)
    } else if b <= 0.0 {
        std_normal_cdf(b) - std_normal_cdf(a)
    } else {
        1.0 - upper_tail(b) - std_normal_cdf(a)
    }
}

fn std_normal_quantile(q: f64) -> f64 {
    if q <= 0.0 {
        f64::NEG_INFINITY
    } else if q >= 1.0 {
        f64::INFINITY
    } else if q > 0.5 {
        -lower_tail_quantile(1.0 - q)
    } else {
        lower_tail_quantile(q)
    }
}

/// `Φ⁻¹(q)` for `q ≤ 0.5`; the `erfc_inv` estimate is refined by Newton steps on `Φ`.
fn lower_tail_quantile(q: f64) -> f64 {
    let mut z = -SQRT_2 * erfc_inv(2.0 * q);
    for _ in 0..2 {
        let density = INV_SQRT_2PI * (-0.5 * z * z).exp();
        if !(density > 0.0) {
            break;
        }
        z -= (std_normal_cdf(z) - q) / density;
    }
    z
}

/// `∫_a^b p^k r e^{-r p + log_scale} dp` for the exponential density with rate `r`.
fn exponential_moment(r: f64, a: f64, b: f64, k: u32, log_scale: f64) -> f64 {
    // Antiderivative is -e^{-rp} Σ_{i=0}^{k} k!/(k-i)! p^{k-i} / r^i.
    let poly = |p: f64| {
        let mut term = 1.0;
        let mut sum = 0.0;
        for i in 0..=k {
            sum += term * p.powi((k - i) as i32);
            term *= f64::from(k - i) / r;
        }
        sum
    };
    let at = |p: f64| {
        if p == f64::INFINITY {
            0.0
        } else {
            (log_scale - r * p).exp() * poly(p)
        }
    };
    (at(a) - at(b)).max(0.0)
}

/// `∫_a^b p^k e^{-λ(p - c)} dp` for `k ≤ 2`, stable for small and large `λ (b - a)`.
pub(crate) fn segment_tilted(a: f64, b: f64, k: u32, lambda: f64, c: f64) -> f64 {
    debug_assert!(k <= 2);
    let w = b - a;
    if !(w > 0.0) {
        return 0.0;
    }
    let x = lambda * w;
    let mut m = [0.0f64; 3];
    if x.abs() < 2.0 {
        // Series of ∫_0^w u^j e^{-λu} du = w^{j+1} Σ (-x)^n / (n! (n + j + 1)).
        for (j, slot) in m.iter_mut().enumerate() {
            let mut term = 1.0;
            let mut sum = 0.0;
            for n in 0..40 {
                let contrib = term / (n + j + 1) as f64;
                sum += contrib;
                if contrib.abs() < 1e-18 * sum.abs() {
                    break;
                }
                term *= -x / (n + 1) as f64;
            }
            *slot = w.powi(j as i32 + 1) * sum;
        }
    } else {
        let e = (-x).exp();
        m[0] = -(-x).exp_m1() / lambda;
        m[1] = (m[0] - w * e) / lambda;
        m[2] = (2.0 * m[1] - w * w * e) / lambda;
    }
    let poly = match k {
        0 => m[0],
        1 => a * m[0] + m[1],
        _ => a * a * m[0] + 2.0 * a * m[1] + m[2],
    };
    (-lambda * (a - c)).exp() * poly
}

impl Landscape {
    pub fn lognormal(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::invalid("mu", "must be finite"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("sigma", "must be positive and finite"));
        }
        let support_hi = (mu + sigma * std_normal_quantile(1.0 - TAIL_MASS)).exp();
        Ok(Landscape {
            kind: LandscapeKind::Lognormal { mu, sigma },
            support_hi,
            degenerate: false,
            tables: None,
        })
    }

    pub fn exponential(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid("gamma", "must be positive and finite"));
        }
        Ok(Landscape {
            kind: LandscapeKind::Exponential { gamma },
            support_hi: -TAIL_MASS.ln() / gamma,
            degenerate: false,
            tables: None,
        })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && lo.is_finite()) {
            return Err(Error::invalid("lo", "must be finite and non-negative"));
        }
        if !(hi > lo && hi.is_finite()) {
            return Err(Error::invalid("hi", "must be finite and greater than lo"));
        }
        Ok(Landscape {
            kind: LandscapeKind::Uniform { lo, hi },
            support_hi: hi,
            degenerate: false,
            tables: None,
        })
    }

    /// Empirical landscape: the CDF interpolates linearly through
    /// `(x_(i), (i-1)/(n-1))` and is flat outside the sample range.
    pub fn fit_empirical(samples: &[f64]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid("samples", "need at least 2 samples"));
        }
        if let Some(bad) = samples.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::invalid(
                "samples",
                format!("prices must be finite and non-negative, got {bad}"),
            ));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let seg_mass = 1.0 / (n - 1) as f64;
        let mut cum: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n - 1 {
            let (a, b) = (sorted[i], sorted[i + 1]);
            for (k, table) in cum.iter_mut().enumerate() {
                let piece = if b > a {
                    let e = k as i32 + 1;
                    seg_mass * (b.powi(e) - a.powi(e)) / (e as f64 * (b - a))
                } else {
                    seg_mass * a.powi(k as i32)
                };
                table[i + 1] = table[i] + piece;
            }
        }
        let degenerate = sorted[0] == sorted[n - 1];
        Ok(Landscape {
            support_hi: sorted[n - 1],
            kind: LandscapeKind::Empirical { samples: sorted },
            degenerate,
            tables: Some(EmpiricalTables { cum }),
        })
    }

    pub fn kind(&self) -> &LandscapeKind {
        &self.kind
    }

    /// Largest price considered by quadrature; `quantile(1 - 1e-12)` for unbounded kinds.
    pub fn support_hi(&self) -> f64 {
        self.support_hi
    }

    pub fn support_lo(&self) -> f64 {
        match &self.kind {
            LandscapeKind::Uniform { lo, .. } => *lo,
            LandscapeKind::Empirical { samples } => samples[0],
            _ => 0.0,
        }
    }

    /// Zero-variance landscapes are rejected by solvers that need a non-singular Jacobian.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn pdf(&self, p: f64) -> f64 {
        if !(p >= 0.0) {
            return 0.0;
        }
        match &self.kind {
            LandscapeKind::Lognormal { mu, sigma } => {
                if p == 0.0 || p == f64::INFINITY {
                    return 0.0;
                }
                let z = (p.ln() - mu) / sigma;
                INV_SQRT_2PI * (-0.5 * z * z).exp() / (p * sigma)
            }
            LandscapeKind::Exponential { gamma } => gamma * (-gamma * p).exp(),
            LandscapeKind::Uniform { lo, hi } => {
                if p >= *lo && p <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            LandscapeKind::Empirical { samples } => {
                let n = samples.len();
                if p < samples[0] || p >= samples[n - 1] {
                    return 0.0;
                }
                let j = samples.partition_point(|&x| x <= p) - 1;
                1.0 / ((n - 1) as f64 * (samples[j + 1] - samples[j]))
            }
        }
    }

    pub fn cdf(&self, p: f64) -> f64 {
        if !(p >= 0.0) {
            return 0.0;
        }
        match &self.kind {
            LandscapeKind::Lognormal { mu, sigma } => {
                if p == 0.0 {
                    0.0
                } else {
                    std_normal_cdf((p.ln() - mu) / sigma)
                }
            }
            LandscapeKind::Exponential { gamma } => -(-gamma * p).exp_m1(),
            LandscapeKind::Uniform { lo, hi } => ((p - lo) / (hi - lo)).clamp(0.0, 1.0),
            LandscapeKind::Empirical { samples } => {
                let n = samples.len();
                if p < samples[0] {
                    return 0.0;
                }
                if p >= samples[n - 1] {
                    return 1.0;
                }
                let j = samples.partition_point(|&x| x <= p) - 1;
                (j as f64 + (p - samples[j]) / (samples[j + 1] - samples[j])) / (n - 1) as f64
            }
        }
    }

    /// Survival `1 - F(p)`, accurate in the upper tail for analytic kinds.
    pub fn sf(&self, p: f64) -> f64 {
        match &self.kind {
            LandscapeKind::Lognormal { mu, sigma } if p > 0.0 => {
                std_normal_mass((p.ln() - mu) / sigma, f64::INFINITY)
            }
            LandscapeKind::Exponential { gamma } if p >= 0.0 => (-gamma * p).exp(),
            _ => 1.0 - self.cdf(p),
        }
    }

    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid("q", format!("probability {q} outside [0, 1]")));
        }
        Ok(self.quantile_unchecked(q))
    }

    pub(crate) fn quantile_unchecked(&self, q: f64) -> f64 {
        match &self.kind {
            LandscapeKind::Lognormal { mu, sigma } => {
                if q >= 1.0 {
                    self.support_hi
                } else {
                    (mu + sigma * std_normal_quantile(q)).exp()
                }
            }
            LandscapeKind::Exponential { gamma } => {
                if q >= 1.0 {
                    self.support_hi
                } else {
                    -(-q).ln_1p() / gamma
                }
            }
            LandscapeKind::Uniform { lo, hi } => lo + q * (hi - lo),
            LandscapeKind::Empirical { samples } => {
                let n = samples.len();
                let h = q * (n - 1) as f64;
                let i = (h.floor() as usize).min(n - 2);
                let frac = h - i as f64;
                samples[i] + frac * (samples[i + 1] - samples[i])
            }
        }
    }

    /// `∫_lo^hi p^k f(p) dp`; `hi` may be `+∞`.
    pub fn partial_moment(&self, lo: f64, hi: f64, k: u32) -> Result<PartialMoment> {
        if !(lo >= 0.0) {
            return Err(Error::invalid("lo", "must be non-negative"));
        }
        if lo > hi || hi.is_nan() {
            return Err(Error::invalid("hi", format!("window [{lo}, {hi}] is reversed")));
        }
        Ok(PartialMoment {
            lo,
            hi,
            order: k,
            value: self.moment(lo, hi, k),
        })
    }

    /// Unchecked [`partial_moment`](Self::partial_moment); returns 0 for empty windows.
    pub fn moment(&self, lo: f64, hi: f64, k: u32) -> f64 {
        let lo = lo.max(0.0);
        if !(hi > lo) {
            return 0.0;
        }
        match &self.kind {
            LandscapeKind::Lognormal { mu, sigma } => {
                let kf = f64::from(k);
                let shift = mu + kf * sigma * sigma;
                let z = |p: f64| {
                    if p == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        (p.ln() - shift) / sigma
                    }
                };
                let scale = (kf * mu + 0.5 * kf * kf * sigma * sigma).exp();
                scale * std_normal_mass(z(lo), z(hi))
            }
            LandscapeKind::Exponential { gamma } => exponential_moment(*gamma, lo, hi, k, 0.0),
            LandscapeKind::Uniform { lo: a, hi: b } => {
                let l = lo.max(*a);
                let h = hi.min(*b);
                if !(h > l) {
                    return 0.0;
                }
                let e = k as i32 + 1;
                (h.powi(e) - l.powi(e)) / (e as f64 * (b - a))
            }
            LandscapeKind::Empirical { samples } => {
                if k <= 2 {
                    self.empirical_cumulative(hi, k) - self.empirical_cumulative_left(lo, k)
                } else {
                    let n = samples.len();
                    let mass = 1.0 / (n - 1) as f64;
                    samples
                        .windows(2)
                        .map(|w| {
                            let (a, b) = (w[0], w[1]);
                            if b > a {
                                let l = lo.max(a);
                                let h = hi.min(b);
                                if h > l {
                                    let e = k as i32 + 1;
                                    mass * (h.powi(e) - l.powi(e)) / (e as f64 * (b - a))
                                } else {
                                    0.0
                                }
                            } else if atom_in_window(a, lo, hi) {
                                mass * a.powi(k as i32)
                            } else {
                                0.0
                            }
                        })
                        .sum()
                }
            }
        }
    }

    /// `∫_{[0, x]} p^k dF` for the empirical landscape, right-continuous in `x`.
    fn empirical_cumulative(&self, x: f64, k: u32) -> f64 {
        let (samples, tables) = match (&self.kind, &self.tables) {
            (LandscapeKind::Empirical { samples }, Some(t)) => (samples, t),
            _ => unreachable!("empirical tables missing"),
        };
        let cum = &tables.cum[k as usize];
        let n = samples.len();
        if x < samples[0] {
            return 0.0;
        }
        if x >= samples[n - 1] {
            return cum[n - 1];
        }
        let j = samples.partition_point(|&s| s <= x) - 1;
        let (a, b) = (samples[j], samples[j + 1]);
        let e = k as i32 + 1;
        cum[j] + (x.powi(e) - a.powi(e)) / (e as f64 * (b - a) * (n - 1) as f64)
    }

    /// Lower end of a window: atoms at `lo` are excluded unless `lo == 0`.
    fn empirical_cumulative_left(&self, lo: f64, k: u32) -> f64 {
        if lo <= 0.0 {
            0.0
        } else {
            self.empirical_cumulative(lo, k)
        }
    }

    /// Probability mass sitting exactly at `x` (non-zero only for tied samples).
    pub fn atom(&self, x: f64) -> f64 {
        match &self.kind {
            LandscapeKind::Empirical { samples } => {
                let lo = samples.partition_point(|&s| s < x);
                let hi = samples.partition_point(|&s| s <= x);
                (hi - lo).saturating_sub(1) as f64 / (samples.len() - 1) as f64
            }
            _ => 0.0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.moment(0.0, f64::INFINITY, 1)
    }

    /// `F(hi) − F(lo)` with the same window conventions as [`moment`](Self::moment).
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        self.moment(lo, hi, 0)
    }

    /// `E[p | lo ≤ p ≤ hi]`.
    pub fn conditional_mean(&self, lo: f64, hi: f64) -> Result<f64> {
        let m0 = self.partial_moment(lo, hi, 0)?.value;
        if !(m0 > 0.0) {
            return Err(Error::ZeroMassWindow { lo, hi });
        }
        let m1 = self.moment(lo, hi, 1);
        Ok((m1 / m0).clamp(lo, hi))
    }

    /// Variance of `p` conditioned on the window; zero for point-mass windows.
    pub fn conditional_variance(&self, lo: f64, hi: f64) -> Result<f64> {
        let m0 = self.partial_moment(lo, hi, 0)?.value;
        if !(m0 > 0.0) {
            return Err(Error::ZeroMassWindow { lo, hi });
        }
        let mean = self.moment(lo, hi, 1) / m0;
        let c2 = self.moment(lo, hi, 2) / m0 - mean * mean;
        Ok(c2.max(0.0))
    }

    /// `∫_lo^hi p^k e^{-λ(p - shift)} f(p) dp`, the exponentially tilted partial moment.
    ///
    /// `shift` keeps the exponent small when `λ` is large; callers pass a value
    /// at or below `lo`.
    pub fn tilted_moment(&self, lo: f64, hi: f64, k: u32, lambda: f64, shift: f64) -> f64 {
        let lo = lo.max(0.0);
        if !(hi > lo) {
            return 0.0;
        }
        if lambda == 0.0 {
            return self.moment(lo, hi, k);
        }
        match &self.kind {
            LandscapeKind::Exponential { gamma } => {
                let r = gamma + lambda;
                gamma / r * exponential_moment(r, lo, hi, k, lambda * shift)
            }
            LandscapeKind::Uniform { lo: a, hi: b } => {
                let l = lo.max(*a);
                let h = hi.min(*b);
                if !(h > l) {
                    return 0.0;
                }
                let inner = if k <= 2 {
                    segment_tilted(l, h, k, lambda, shift)
                } else {
                    integrate_with(
                        |p| p.powi(k as i32) * (-lambda * (p - shift)).exp(),
                        l,
                        h,
                        &[],
                        Tolerance { abs: 1e-14, rel: 1e-12 },
                    )
                    .value
                };
                inner / (b - a)
            }
            LandscapeKind::Empirical { samples } => {
                let mass = 1.0 / (samples.len() - 1) as f64;
                samples
                    .windows(2)
                    .map(|w| {
                        let (a, b) = (w[0], w[1]);
                        if b > a {
                            let l = lo.max(a);
                            let h = hi.min(b);
                            if h > l {
                                let seg = if k <= 2 {
                                    segment_tilted(l, h, k, lambda, shift)
                                } else {
                                    integrate_with(
                                        |p| p.powi(k as i32) * (-lambda * (p - shift)).exp(),
                                        l,
                                        h,
                                        &[],
                                        Tolerance { abs: 1e-14, rel: 1e-12 },
                                    )
                                    .value
                                };
                                mass * seg / (b - a)
                            } else {
                                0.0
                            }
                        } else if atom_in_window(a, lo, hi) {
                            mass * a.powi(k as i32) * (-lambda * (a - shift)).exp()
                        } else {
                            0.0
                        }
                    })
                    .sum()
            }
            LandscapeKind::Lognormal { mu, sigma } => {
                lognormal_tilted(*mu, *sigma, lo, hi, k, lambda, shift)
            }
        }
    }

    /// `∫_lo^hi g(p) f(p) dp` by adaptive quadrature (truncated at `support_hi`).
    pub fn integrate<G: Fn(f64) -> f64>(&self, g: G, lo: f64, hi: f64) -> f64 {
        self.integrate_with_breaks(g, lo, hi, &[])
    }

    /// As [`integrate`](Self::integrate), splitting additionally at `breaks`
    /// (kinks of `g`).
    pub fn integrate_with_breaks<G: Fn(f64) -> f64>(
        &self,
        g: G,
        lo: f64,
        hi: f64,
        breaks: &[f64],
    ) -> f64 {
        let lo = lo.max(self.support_lo()).max(0.0);
        let hi = hi.min(self.support_hi);
        if !(hi > lo) {
            return 0.0;
        }
        let tol = Tolerance {
            abs: 1e-13,
            rel: 1e-11,
        };
        match &self.kind {
            LandscapeKind::Empirical { samples } => {
                let mass = 1.0 / (samples.len() - 1) as f64;
                samples
                    .windows(2)
                    .map(|w| {
                        let (a, b) = (w[0], w[1]);
                        if b > a {
                            let l = lo.max(a);
                            let h = hi.min(b);
                            if h > l {
                                let dens = mass / (b - a);
                                integrate_with(|p| g(p) * dens, l, h, breaks, tol).value
                            } else {
                                0.0
                            }
                        } else if atom_in_window(a, lo, hi) {
                            mass * g(a)
                        } else {
                            0.0
                        }
                    })
                    .sum()
            }
            _ => {
                let mut cuts: Vec<f64> = QUANTILE_BREAKS
                    .iter()
                    .map(|&q| self.quantile_unchecked(q))
                    .collect();
                cuts.extend_from_slice(breaks);
                integrate_with(|p| g(p) * self.pdf(p), lo, hi, &cuts, tol).value
            }
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            LandscapeKind::Lognormal { mu, sigma } => LogNormal::new(*mu, *sigma)
                .expect("validated parameters")
                .sample(rng),
            LandscapeKind::Exponential { gamma } => {
                Exp::new(*gamma).expect("validated parameters").sample(rng)
            }
            LandscapeKind::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            LandscapeKind::Empirical { .. } => {
                let u: f64 = rng.random();
                self.quantile_unchecked(u)
            }
        }
    }

    /// `n` i.i.d. prices drawn with the caller's generator.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }
}

/// Tilted lognormal moment by quadrature in `u = ln p`, where the integrand is
/// a smooth bump; the upper cut sits ten standard deviations past the mode of `p^k f`.
fn lognormal_tilted(mu: f64, sigma: f64, lo: f64, hi: f64, k: u32, lambda: f64, shift: f64) -> f64 {
    let kf = f64::from(k);
    let centre = mu + kf * sigma * sigma;
    let u_lo = if lo > 0.0 { lo.ln() } else { f64::NEG_INFINITY }.max(mu - 40.0 * sigma);
    let u_hi = hi.ln().min(centre + 10.0 * sigma);
    if !(u_hi > u_lo) {
        return 0.0;
    }
    let mut breaks: Vec<f64> = (-8..=8).map(|j| centre + f64::from(j) * sigma).collect();
    if lambda > 0.0 {
        breaks.push(-lambda.ln());
    }
    let integrand = |u: f64| {
        let z = (u - mu) / sigma;
        let p = u.exp();
        (kf * u - lambda * (p - shift) - 0.5 * z * z).exp() * INV_SQRT_2PI / sigma
    };
    let tol = Tolerance {
        abs: 1e-15,
        rel: 1e-12,
    };
    integrate_with(integrand, u_lo, u_hi, &breaks, tol).value
}

fn atom_in_window(x: f64, lo: f64, hi: f64) -> bool {
    (x > lo || (lo <= 0.0 && x >= lo)) && x <= hi
}

/// Parses a sample file: one decimal price per line, blank lines ignored.
pub fn parse_samples(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let value: f64 = line.parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("not a number: {line:?}"),
        })?;
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("price must be finite and non-negative, got {line}"),
            });
        }
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    fn all_kinds() -> Vec<Landscape> {
        vec![
            Landscape::lognormal(0.0, 1.0).unwrap(),
            Landscape::lognormal(0.3, 0.25).unwrap(),
            Landscape::lognormal(0.0, 2.0).unwrap(),
            Landscape::exponential(1.7).unwrap(),
            Landscape::uniform(0.0, 1.0).unwrap(),
            Landscape::uniform(0.5, 2.0).unwrap(),
            Landscape::fit_empirical(&[0.1, 0.4, 0.4, 0.9, 1.3, 2.0]).unwrap(),
        ]
    }

    #[test]
    fn pdf_examples() {
        assert_eq!(Landscape::uniform(0.0, 1.0).unwrap().pdf(0.3), 1.0);
        assert_eq!(Landscape::exponential(1.0).unwrap().pdf(0.0), 1.0);
        let l = Landscape::lognormal(0.0, 1.0).unwrap();
        assert!((l.pdf(1.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert_eq!(l.pdf(0.0), 0.0);
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(Landscape::uniform(0.0, 1.0).unwrap().cdf(0.5), 0.5);
        assert_eq!(Landscape::exponential(1.0).unwrap().cdf(f64::INFINITY), 1.0);
        let e = Landscape::fit_empirical(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((e.cdf(2.5) - 0.5).abs() < 1e-15);
        assert_eq!(e.cdf(0.5), 0.0);
        assert_eq!(e.cdf(4.0), 1.0);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(Landscape::uniform(0.0, 1.0).unwrap().quantile(0.25).unwrap(), 0.25);
        let e = Landscape::exponential(1.0).unwrap();
        assert!((e.quantile(1.0 - (-1.0f64).exp()).unwrap() - 1.0).abs() < 1e-14);
        let l = Landscape::lognormal(0.0, 0.5).unwrap();
        assert!((l.quantile(0.5).unwrap() - 1.0).abs() < 1e-15);
        let emp = Landscape::fit_empirical(&[4.0, 2.0, 1.0, 3.0]).unwrap();
        assert!((emp.quantile(0.5).unwrap() - 2.5).abs() < 1e-15);
        assert!(l.quantile(1.2).is_err());
        assert!(l.quantile(-0.1).is_err());
    }

    #[test]
    fn partial_moment_examples() {
        let u = Landscape::uniform(0.0, 1.0).unwrap();
        assert!((u.partial_moment(0.0, 1.0, 1).unwrap().value - 0.5).abs() < 1e-15);
        let m2 = u.partial_moment(0.2, 0.8, 2).unwrap().value;
        let mass = u.cdf(0.8) - u.cdf(0.2);
        assert!((m2 / mass - 0.28).abs() < 1e-14);
        assert!((u.conditional_variance(0.2, 0.8).unwrap() - 0.03).abs() < 1e-14);
        let e = Landscape::exponential(1.0).unwrap();
        assert!((e.partial_moment(0.0, f64::INFINITY, 1).unwrap().value - 1.0).abs() < 1e-15);
        assert!(u.partial_moment(0.6, 0.2, 1).is_err());
    }

    #[test]
    fn conditional_mean_examples() {
        let u = Landscape::uniform(0.0, 1.0).unwrap();
        assert!((u.conditional_mean(0.2, 0.8).unwrap() - 0.5).abs() < 1e-15);
        assert!((u.conditional_mean(0.0, 0.5).unwrap() - 0.25).abs() < 1e-15);
        let e = Landscape::exponential(1.0).unwrap();
        assert!((e.conditional_mean(0.0, f64::INFINITY).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            u.conditional_mean(1.5, 2.0),
            Err(Error::ZeroMassWindow { .. })
        ));
    }

    #[test]
    fn closed_form_moments_match_quadrature() {
        for l in all_kinds() {
            for &(a, b) in &[(0.0, 0.7), (0.3, 1.9), (0.0, f64::INFINITY), (0.45, 0.46)] {
                for k in 0..=3 {
                    let exact = l.moment(a, b, k);
                    let quad = l.integrate(|p| p.powi(k as i32), a, b);
                    // Quadrature stops at support_hi by design.
                    let exact = if b > l.support_hi() {
                        exact - l.moment(l.support_hi(), b, k)
                    } else {
                        exact
                    };
                    assert!(
                        (exact - quad).abs() <= 1e-9 * (1.0 + exact.abs()),
                        "{:?} [{a},{b}] k={k}: {exact} vs {quad}",
                        l.kind()
                    );
                }
            }
        }
    }

    #[test]
    fn tilted_moments_match_quadrature() {
        for l in all_kinds() {
            for &lambda in &[0.0, 1e-6, 0.3, 2.5, 40.0] {
                for &(a, b) in &[(0.0, f64::INFINITY), (0.35, 1.2)] {
                    if b == f64::INFINITY && lambda < 0.1 {
                        // The oracle truncates at support_hi; the untilted tail is not negligible.
                        continue;
                    }
                    for k in 0..=2 {
                        let exact = l.tilted_moment(a, b, k, lambda, a);
                        let quad =
                            l.integrate(|p| p.powi(k as i32) * (-lambda * (p - a)).exp(), a, b);
                        assert!(
                            (exact - quad).abs() <= 1e-9 * (1.0 + quad.abs()),
                            "{:?} λ={lambda} [{a},{b}] k={k}: {exact} vs {quad}",
                            l.kind()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn density_integrates_to_one() {
        for l in all_kinds() {
            let total = l.integrate(|_| 1.0, 0.0, f64::INFINITY);
            assert!((total - 1.0).abs() < 1e-8, "{:?}: {total}", l.kind());
            assert!((l.cdf(l.support_hi()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for l in all_kinds() {
            if matches!(l.kind(), LandscapeKind::Empirical { .. }) {
                continue;
            }
            for i in 1..50 {
                let q = i as f64 / 50.0;
                let p = l.quantile(q).unwrap();
                assert!(close(l.cdf(p), q, 1e-12));
                assert!(close(l.quantile(l.cdf(p)).unwrap(), p, 1e-9));
            }
        }
    }

    #[test]
    fn empirical_with_ties_is_right_continuous() {
        let l = Landscape::fit_empirical(&[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((l.cdf(2.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((l.cdf(2.0 - 1e-12) - 1.0 / 3.0).abs() < 1e-9);
        let whole = l.moment(0.0, 10.0, 1);
        let split = l.moment(0.0, 2.0, 1) + l.moment(2.0, 10.0, 1);
        assert!((whole - split).abs() < 1e-15);
        assert!((whole - 2.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_fit_is_flagged() {
        let l = Landscape::fit_empirical(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(l.is_degenerate());
        assert_eq!(l.cdf(1.0), 1.0);
        assert_eq!(l.quantile(0.3).unwrap(), 1.0);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(Landscape::fit_empirical(&[1.0]).is_err());
        assert!(Landscape::fit_empirical(&[]).is_err());
        assert!(Landscape::fit_empirical(&[1.0, -2.0]).is_err());
        assert!(Landscape::fit_empirical(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn constructors_validate() {
        assert!(Landscape::lognormal(0.0, 0.0).is_err());
        assert!(Landscape::exponential(-1.0).is_err());
        assert!(Landscape::uniform(1.0, 1.0).is_err());
        assert!(Landscape::uniform(-1.0, 1.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_empty_for_zero() {
        let l = Landscape::uniform(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(l.sample(&mut rng, 0).is_empty());
        let a = l.sample(&mut ChaCha8Rng::seed_from_u64(42), 5);
        let b = l.sample(&mut ChaCha8Rng::seed_from_u64(42), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn exponential_sample_mean() {
        let l = Landscape::exponential(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = l.sample(&mut rng, 1_000_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((0.997..=1.003).contains(&mean), "{mean}");
    }

    #[test]
    fn sampling_matches_cdf() {
        // Kolmogorov distance of 10^6 draws against the model cdf, on a price grid.
        for l in [
            Landscape::lognormal(0.0, 1.0).unwrap(),
            Landscape::fit_empirical(&[0.2, 0.5, 0.5, 1.1, 3.0]).unwrap(),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut xs = l.sample(&mut rng, 1_000_000);
            xs.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            let mut ks = 0.0f64;
            for i in 0..=4000 {
                let p = l.quantile(i as f64 / 4000.0).unwrap();
                let below = xs.partition_point(|&x| x <= p) as f64 / n;
                ks = ks.max((below - l.cdf(p)).abs());
            }
            assert!(ks < 0.002, "{:?}: {ks}", l.kind());
        }
    }

    #[test]
    fn fitted_lognormal_is_close_in_kolmogorov_distance() {
        let truth = Landscape::lognormal(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = truth.sample(&mut rng, 100_000);
        let fit = Landscape::fit_empirical(&xs).unwrap();
        let mut ks = 0.0f64;
        for i in 1..2000 {
            let p = truth.quantile(i as f64 / 2000.0).unwrap();
            ks = ks.max((fit.cdf(p) - truth.cdf(p)).abs());
        }
        assert!(ks < 0.01, "{ks}");
    }

    #[test]
    fn parse_samples_handles_blank_lines_and_errors() {
        let v = parse_samples("1.5\n\n  2\n3e-1\n").unwrap();
        assert_eq!(v, vec![1.5, 2.0, 0.3]);
        assert!(matches!(parse_samples("1\nabc\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_samples("-1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_samples("inf\n"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_samples("").unwrap().is_empty());
    }

    #[test]
    fn serde_round_trip_revalidates() {
        let l = Landscape::lognormal(0.0, 0.5).unwrap();
        let json = serde_json::to_string(&l).unwrap();
        assert_eq!(json, r#"{"kind":"lognormal","mu":0.0,"sigma":0.5}"#);
        let back: Landscape = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);
        assert!(serde_json::from_str::<Landscape>(r#"{"kind":"lognormal","mu":0.0,"sigma":-1}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn landscape() -> impl Strategy<Value = Landscape> {
            prop_oneof![
                (-1.0f64..1.0, 0.1f64..2.0).prop_map(|(m, s)| Landscape::lognormal(m, s).unwrap()),
                (0.2f64..5.0).prop_map(|g| Landscape::exponential(g).unwrap()),
                (0.0f64..1.0, 0.1f64..3.0).prop_map(|(a, w)| Landscape::uniform(a, a + w).unwrap()),
                prop::collection::vec(0.0f64..10.0, 2..40)
                    .prop_filter("non-degenerate", |v| v.iter().any(|x| *x != v[0]))
                    .prop_map(|v| Landscape::fit_empirical(&v).unwrap()),
            ]
        }

        proptest! {
            #[test]
            fn moment_additivity(l in landscape(), a in 0.0f64..3.0, b in 0.0f64..3.0, c in 0.0f64..3.0, k in 0u32..3) {
                let mut v = [a, b, c];
                v.sort_by(f64::total_cmp);
                let whole = l.moment(v[0], v[2], k);
                let parts = l.moment(v[0], v[1], k) + l.moment(v[1], v[2], k);
                prop_assert!((whole - parts).abs() <= 1e-9 * (1.0 + whole.abs()));
            }

            #[test]
            fn cdf_monotone(l in landscape(), a in 0.0f64..5.0, d in 0.0f64..5.0) {
                prop_assert!(l.cdf(a) <= l.cdf(a + d));
                prop_assert!((0.0..=1.0).contains(&l.cdf(a)));
            }

            #[test]
            fn conditional_mean_in_window(l in landscape(), a in 0.0f64..3.0, w in 0.01f64..3.0) {
                if let Ok(m) = l.conditional_mean(a, a + w) {
                    prop_assert!(m >= a && m <= a + w);
                }
            }

            #[test]
            fn moment_bounded_by_full(l in landscape(), a in 0.0f64..3.0, w in 0.0f64..3.0, k in 0u32..3) {
                let part = l.moment(a, a + w, k);
                prop_assert!(part >= 0.0);
                prop_assert!(part <= l.moment(0.0, f64::INFINITY, k) * (1.0 + 1e-12));
            }
        }
    }
}

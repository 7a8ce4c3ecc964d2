//! Allocation functions `a(p)/s` and their integrals against a landscape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::Landscape;

/// Shape of `a(p)/s`.
///
/// `L2Saturated` with `p_min == p_max` is the step allocation that buys
/// everything strictly below `p_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum AllocationForm {
    Flat { level: f64 },
    L2Linear { z: f64, p_max: f64 },
    L2Saturated { p_min: f64, p_max: f64 },
    /// `min(1, exp(λ (p0 − p)))`.
    KlExponential { p0: f64, lambda: f64 },
    /// `scale · exp(−λ p)` with `scale ≤ 1`.
    KlUnsaturated { scale: f64, lambda: f64 },
    /// `(price, fraction)` knots, linearly interpolated and constant beyond the ends.
    /// Repeated prices encode a jump; the later knot is the right limit.
    Tabulated { points: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    #[serde(flatten)]
    pub form: AllocationForm,
    pub supply: f64,
    pub demand: f64,
}

/// A price with the left and right limits of a piecewise-linear function there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Knot {
    pub x: f64,
    pub left: f64,
    pub right: f64,
}

/// Relative decay below which exponential tails are cut to zero when linearized.
const EXP_TAIL_CUTOFF: f64 = 1e-13;
/// Step in `λ (p − p0)` between knots of a linearized exponential.
const EXP_KNOT_STEP: f64 = 0.004;

impl Allocation {
    pub fn new(form: AllocationForm, supply: f64, demand: f64) -> Self {
        Allocation {
            form,
            supply,
            demand,
        }
    }

    pub fn flat(level: f64, supply: f64, demand: f64) -> Self {
        Allocation::new(AllocationForm::Flat { level }, supply, demand)
    }

    pub fn step(price: f64, supply: f64, demand: f64) -> Self {
        Allocation::new(
            AllocationForm::L2Saturated {
                p_min: price,
                p_max: price,
            },
            supply,
            demand,
        )
    }

    /// Target fraction `d/s`.
    pub fn fraction(&self) -> f64 {
        self.demand / self.supply
    }

    /// `a(p)/s`; right-continuous and non-increasing for every solver output.
    pub fn value(&self, p: f64) -> f64 {
        match &self.form {
            AllocationForm::Flat { level } => *level,
            AllocationForm::L2Linear { z, p_max } => (z * (p_max - p)).clamp(0.0, 1.0),
            AllocationForm::L2Saturated { p_min, p_max } => {
                if p < *p_min {
                    1.0
                } else if p >= *p_max {
                    0.0
                } else {
                    (p_max - p) / (p_max - p_min)
                }
            }
            AllocationForm::KlExponential { p0, lambda } => {
                if p <= *p0 {
                    1.0
                } else {
                    (lambda * (p0 - p)).exp()
                }
            }
            AllocationForm::KlUnsaturated { scale, lambda } => {
                (scale * (-lambda * p).exp()).min(1.0)
            }
            AllocationForm::Tabulated { points } => tabulated_value(points, p),
        }
    }

    /// Prices where the allocation has a kink or jump.
    pub fn breakpoints(&self) -> Vec<f64> {
        match &self.form {
            AllocationForm::Flat { .. } => vec![],
            AllocationForm::L2Linear { z, p_max } => vec![(p_max - 1.0 / z).max(0.0), *p_max],
            AllocationForm::L2Saturated { p_min, p_max } => vec![*p_min, *p_max],
            AllocationForm::KlExponential { p0, .. } => vec![*p0],
            AllocationForm::KlUnsaturated { scale, lambda } => {
                if *scale > 1.0 && *lambda > 0.0 {
                    vec![scale.ln() / lambda]
                } else {
                    vec![]
                }
            }
            AllocationForm::Tabulated { points } => points.iter().map(|p| p[0]).collect(),
        }
    }

    /// `∫ p^k a(p)/s f(p) dp` over the whole support; exact for `k ≤ 1`.
    pub fn moment(&self, landscape: &Landscape, k: u32) -> f64 {
        let m = |lo: f64, hi: f64, j: u32| landscape.moment(lo, hi, j);
        match &self.form {
            AllocationForm::Flat { level } => level * m(0.0, f64::INFINITY, k),
            AllocationForm::L2Linear { z, p_max } => {
                let lo = (p_max - 1.0 / z).max(0.0);
                m(0.0, lo, k) + z * (p_max * m(lo, *p_max, k) - m(lo, *p_max, k + 1))
            }
            AllocationForm::L2Saturated { p_min, p_max } => {
                let (x, y) = (*p_min, *p_max);
                if y > x {
                    m(0.0, x, k) + (y * m(x, y, k) - m(x, y, k + 1)) / (y - x)
                } else {
                    below(landscape, x, k)
                }
            }
            AllocationForm::KlExponential { p0, lambda } => {
                m(0.0, *p0, k) + landscape.tilted_moment(*p0, f64::INFINITY, k, *lambda, *p0)
            }
            AllocationForm::KlUnsaturated { scale, lambda } => {
                if *scale > 1.0 && *lambda > 0.0 {
                    let p0 = scale.ln() / lambda;
                    m(0.0, p0, k) + landscape.tilted_moment(p0, f64::INFINITY, k, *lambda, p0)
                } else {
                    scale * landscape.tilted_moment(0.0, f64::INFINITY, k, *lambda, 0.0)
                }
            }
            AllocationForm::Tabulated { points } => tabulated_moment(points, landscape, k),
        }
    }

    /// Expected fraction of supply bought, `∫ a(p)/s f(p) dp`.
    pub fn demand_fraction(&self, landscape: &Landscape) -> f64 {
        self.moment(landscape, 0)
    }

    /// Expected spend per unit of supply, `∫ p a(p)/s f(p) dp`.
    pub fn spend_fraction(&self, landscape: &Landscape) -> f64 {
        self.moment(landscape, 1)
    }

    /// Average price paid per delivered impression.
    pub fn spend_per_impression(&self, landscape: &Landscape) -> f64 {
        self.spend_fraction(landscape) / self.demand_fraction(landscape)
    }

    /// Checks `0 ≤ a/s ≤ 1` and monotonicity of the parameters.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("allocation", reason.to_string()));
        if !(self.supply > 0.0 && self.demand >= 0.0 && self.demand <= self.supply) {
            return bad("need 0 ≤ demand ≤ supply and supply > 0");
        }
        match &self.form {
            AllocationForm::Flat { level } if !(0.0..=1.0).contains(level) => {
                bad("flat level outside [0, 1]")
            }
            AllocationForm::L2Linear { z, p_max } if !(*z > 0.0 && *p_max > 0.0) => {
                bad("l2_linear needs z > 0 and p_max > 0")
            }
            AllocationForm::L2Saturated { p_min, p_max } if !(*p_min >= 0.0 && p_max >= p_min) => {
                bad("l2_saturated needs 0 ≤ p_min ≤ p_max")
            }
            AllocationForm::KlExponential { p0, lambda } if !(*p0 >= 0.0 && *lambda >= 0.0) => {
                bad("kl_exponential needs p0 ≥ 0 and lambda ≥ 0")
            }
            AllocationForm::KlUnsaturated { scale, lambda } if !(*scale >= 0.0 && *lambda >= 0.0) => {
                bad("kl_unsaturated needs scale ≥ 0 and lambda ≥ 0")
            }
            AllocationForm::Tabulated { points } => validate_table(points),
            _ => Ok(()),
        }
    }

    /// Piecewise-linear representation on `[0, 2·horizon]`.
    ///
    /// L2 forms are exact. Exponential forms are linearized on a grid that is
    /// uniform in the exponent. Allocations still positive at `horizon` ramp
    /// linearly to zero at `2·horizon`.
    pub(crate) fn knots(&self, horizon: f64) -> Vec<Knot> {
        let cont = |x: f64, v: f64| Knot {
            x,
            left: v,
            right: v,
        };
        let mut out: Vec<Knot> = match &self.form {
            AllocationForm::Flat { level } => vec![cont(0.0, *level)],
            AllocationForm::L2Linear { z, p_max } => {
                let lo = (p_max - 1.0 / z).max(0.0);
                let mut v = vec![cont(0.0, self.value(0.0))];
                if lo > 0.0 {
                    v.push(cont(lo, 1.0));
                }
                v.push(cont(*p_max, 0.0));
                v
            }
            AllocationForm::L2Saturated { p_min, p_max } => {
                if p_max > p_min {
                    let mut v = vec![cont(0.0, 1.0)];
                    if *p_min > 0.0 {
                        v.push(cont(*p_min, 1.0));
                    }
                    v.push(cont(*p_max, 0.0));
                    v
                } else if *p_min > 0.0 {
                    vec![
                        cont(0.0, 1.0),
                        Knot {
                            x: *p_min,
                            left: 1.0,
                            right: 0.0,
                        },
                    ]
                } else {
                    vec![cont(0.0, 0.0)]
                }
            }
            AllocationForm::KlExponential { p0, lambda } => {
                exponential_knots(*p0, *lambda, 1.0, horizon)
            }
            AllocationForm::KlUnsaturated { scale, lambda } => {
                if *scale > 1.0 && *lambda > 0.0 {
                    exponential_knots(scale.ln() / lambda, *lambda, 1.0, horizon)
                } else {
                    exponential_knots(0.0, *lambda, *scale, horizon)
                }
            }
            AllocationForm::Tabulated { points } => {
                let mut v: Vec<Knot> = Vec::with_capacity(points.len() + 1);
                if points[0][0] > 0.0 {
                    v.push(cont(0.0, points[0][1]));
                }
                for pt in points {
                    match v.last_mut() {
                        Some(last) if last.x == pt[0] => last.right = pt[1],
                        _ => v.push(cont(pt[0], pt[1])),
                    }
                }
                v
            }
        };
        let last = *out.last().expect("at least one knot");
        if last.right > 0.0 {
            let start = horizon.max(last.x);
            if start > last.x {
                out.push(cont(start, last.right));
            }
            out.push(cont(2.0 * start.max(f64::MIN_POSITIVE), 0.0));
        }
        out
    }
}

/// Knots for `min(1, level · exp(−λ (p − p0)))` on `[0, ∞)`.
fn exponential_knots(p0: f64, lambda: f64, level: f64, horizon: f64) -> Vec<Knot> {
    let cont = |x: f64, v: f64| Knot {
        x,
        left: v,
        right: v,
    };
    let mut v = vec![cont(0.0, level.min(1.0))];
    if lambda <= 0.0 {
        return v;
    }
    if p0 > 0.0 {
        v.push(cont(p0, level.min(1.0)));
    }
    let limit = 2.0 * horizon.max(p0);
    let mut i = 1;
    loop {
        let u = EXP_KNOT_STEP * i as f64;
        let x = p0 + u / lambda;
        let val = level * (-u).exp();
        if x >= limit || val < EXP_TAIL_CUTOFF {
            let x = x.min(limit);
            v.push(Knot {
                x,
                left: level * (-lambda * (x - p0)).exp(),
                right: 0.0,
            });
            break;
        }
        v.push(cont(x, val));
        i += 1;
    }
    v
}

fn validate_table(points: &[[f64; 2]]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid("allocation", "tabulated allocation has no points"));
    }
    for w in points.windows(2) {
        if !(w[1][0] >= w[0][0]) {
            return Err(Error::invalid("allocation", "tabulated prices must be sorted"));
        }
        if w[1][1] > w[0][1] {
            return Err(Error::IncreasingAllocation { at: w[1][0] });
        }
    }
    for pt in points {
        if !(pt[0] >= 0.0 && pt[0].is_finite()) || !(0.0..=1.0).contains(&pt[1]) {
            return Err(Error::invalid(
                "allocation",
                format!("tabulated point ({}, {}) out of range", pt[0], pt[1]),
            ));
        }
    }
    Ok(())
}

pub(crate) fn tabulated_value(points: &[[f64; 2]], p: f64) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    if !(p >= points[0][0]) {
        return points[0][1];
    }
    // Index of the last knot with price ≤ p; right limits win at jumps.
    let j = points.partition_point(|pt| pt[0] <= p).saturating_sub(1);
    if j + 1 >= n {
        return points[n - 1][1];
    }
    let (a, b) = (points[j], points[j + 1]);
    if b[0] == a[0] {
        return b[1];
    }
    a[1] + (b[1] - a[1]) * (p - a[0]) / (b[0] - a[0])
}

fn tabulated_moment(points: &[[f64; 2]], landscape: &Landscape, k: u32) -> f64 {
    let n = points.len();
    let mut total = points[0][1] * below(landscape, points[0][0], k);
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b[0] > a[0] {
            let slope = (b[1] - a[1]) / (b[0] - a[0]);
            let intercept = a[1] - slope * a[0];
            total += intercept * landscape.moment(a[0], b[0], k)
                + slope * landscape.moment(a[0], b[0], k + 1);
        }
    }
    total + points[n - 1][1] * landscape.moment(points[n - 1][0], f64::INFINITY, k)
}

/// `∫_{[0, x)} p^k f`, excluding any atom at `x`.
fn below(landscape: &Landscape, x: f64, k: u32) -> f64 {
    landscape.moment(0.0, x, k) - landscape.atom(x) * x.powi(k as i32)
}

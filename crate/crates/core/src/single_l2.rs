//! Single-contract allocation closest to flat in L2.
//!
//! The optimum is `a(p)/s = min{1, z (p_max − p)}` clipped at zero. When the
//! spend target is generous the allocation never saturates (`z·p_max ≤ 1`) and
//! is found by bisection on `p_max`; otherwise it saturates below `p_min` and
//! `(p_min, p_max)` solve a 2×2 system by damped Newton.

use serde::Serialize;

use crate::allocation::{Allocation, AllocationForm};
use crate::error::{Error, Result};
use crate::landscape::Landscape;
use crate::roots::brent;

pub const RESIDUAL_TOL: f64 = 1e-10;
pub const MAX_NEWTON_ITER: usize = 100;
const MAX_HALVINGS: usize = 40;
const BISECT_REL_WIDTH: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpendRange {
    pub t_min: f64,
    pub t_bar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveCase {
    /// `d = s`: buy everything.
    FullSupply,
    /// Spend constraint slack: flat `d/s`.
    Flat,
    /// `t = t_min`: bid a single price.
    Step,
    /// Unsaturated linear allocation.
    Linear,
    /// Saturated below `p_min`, linear to `p_max`.
    Saturated,
    /// Unsaturated exponential allocation.
    KlUnsaturated,
    /// Saturated below `p0`, exponential above.
    KlSaturated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverDiagnostics {
    pub case: SolveCase,
    /// Demand multiplier (L2: intercept shift; KL: log normalizer).
    pub lambda1: f64,
    /// Spend multiplier; `None` when unbounded (step allocation).
    pub lambda2: Option<f64>,
    pub demand_residual: f64,
    pub spend_residual: f64,
    pub iterations: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution {
    pub allocation: Allocation,
    pub diagnostics: SolverDiagnostics,
}

/// `J = prefactor · bracket`, rows (demand, spend), columns (∂/∂p_max, ∂/∂p_min).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jacobian {
    pub prefactor: f64,
    pub bracket: [[f64; 2]; 2],
}

impl Jacobian {
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let b = &self.bracket;
        let c = self.prefactor;
        [[c * b[0][0], c * b[0][1]], [c * b[1][0], c * b[1][1]]]
    }

    pub fn bracket_determinant(&self) -> f64 {
        let b = &self.bracket;
        b[0][0] * b[1][1] - b[0][1] * b[1][0]
    }
}

pub(crate) fn check_contract(d: f64, s: f64) -> Result<f64> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid("supply", "must be positive and finite"));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::invalid("demand", "must be positive and finite"));
    }
    if d > s {
        return Err(Error::OverDemand {
            demand: d,
            supply: s,
        });
    }
    Ok(d / s)
}

/// `[t_min, t_bar]`: cheapest average price for the demand, and the landscape mean.
pub fn feasible_spend_range(landscape: &Landscape, d: f64, s: f64) -> Result<SpendRange> {
    let q = check_contract(d, s)?;
    if landscape.is_degenerate() {
        return Err(Error::DegenerateLandscape);
    }
    Ok(spend_range_for_fraction(landscape, q))
}

pub(crate) fn spend_range_for_fraction(landscape: &Landscape, q: f64) -> SpendRange {
    let t_bar = landscape.mean();
    if q >= 1.0 {
        return SpendRange { t_min: t_bar, t_bar };
    }
    let pq = landscape.quantile_unchecked(q);
    let t_min = (landscape.moment(0.0, pq, 1) / landscape.moment(0.0, pq, 0)).min(t_bar);
    SpendRange { t_min, t_bar }
}

/// Demand and spend residuals of the saturated form at `(x, y) = (p_min, p_max)`.
pub fn saturated_residuals(landscape: &Landscape, q: f64, t: f64, x: f64, y: f64) -> [f64; 2] {
    let fx = landscape.moment(0.0, x, 0);
    let w0 = landscape.moment(x, y, 0);
    let w1 = landscape.moment(x, y, 1);
    let w2 = landscape.moment(x, y, 2);
    let h = y - x;
    [
        fx + (y * w0 - w1) / h - q,
        landscape.moment(0.0, x, 1) + (y * w1 - w2) / h - q * t,
    ]
}

/// Analytic Jacobian of [`saturated_residuals`].
pub fn jacobian(landscape: &Landscape, x: f64, y: f64) -> Result<Jacobian> {
    if !(x >= 0.0 && y > x) {
        return Err(Error::invalid("p_min", format!("need 0 ≤ p_min < p_max, got ({x}, {y})")));
    }
    let m0 = landscape.moment(x, y, 0);
    if !(m0 > 0.0) {
        return Err(Error::ZeroMassWindow { lo: x, hi: y });
    }
    let ep = (landscape.moment(x, y, 1) / m0).clamp(x, y);
    let var = landscape.conditional_variance(x, y)?;
    let h = y - x;
    Ok(Jacobian {
        prefactor: m0 / (h * h),
        bracket: [
            [ep - x, y - ep],
            [var + ep * (ep - x), ep * (y - ep) - var],
        ],
    })
}

fn max_abs(r: [f64; 2]) -> f64 {
    r[0].abs().max(r[1].abs())
}

/// Damped Newton for `(p_min, p_max)` from `(x0, y0)`.
///
/// Each step is halved until the iterate keeps `0 ≤ x < y`, has positive window
/// mass and reduces the max-norm residual.
pub fn newton_solve_pmin_pmax(
    landscape: &Landscape,
    d: f64,
    s: f64,
    t: f64,
    x0: f64,
    y0: f64,
) -> Result<(f64, f64, SolverDiagnostics)> {
    let q = check_contract(d, s)?;
    if landscape.is_degenerate() {
        return Err(Error::DegenerateLandscape);
    }
    if !(x0 >= 0.0 && y0 > x0) {
        return Err(Error::invalid("x0", format!("need 0 ≤ x0 < y0, got ({x0}, {y0})")));
    }
    let range = spend_range_for_fraction(landscape, q);
    if t <= range.t_min {
        let pq = landscape.quantile_unchecked(q);
        return Err(Error::DegenerateWindow { x: pq, y: pq });
    }
    newton_core(landscape, q, t, x0, y0)
}

fn newton_core(
    landscape: &Landscape,
    q: f64,
    t: f64,
    x0: f64,
    y0: f64,
) -> Result<(f64, f64, SolverDiagnostics)> {
    let (mut x, mut y) = (x0, y0);
    let mut r = saturated_residuals(landscape, q, t, x, y);
    let scale = [1.0, t.max(f64::MIN_POSITIVE)];
    let norm = |r: [f64; 2]| max_abs([r[0] / scale[0], r[1] / scale[1]]);
    for iter in 0..=MAX_NEWTON_ITER {
        if max_abs(r) < RESIDUAL_TOL {
            return Ok((x, y, saturated_diagnostics(q, x, y, r, iter)));
        }
        if iter == MAX_NEWTON_ITER {
            break;
        }
        if y - x <= 1e-13 * y.max(1.0) {
            return Err(Error::DegenerateWindow { x, y });
        }
        let jac = jacobian(landscape, x, y)?;
        let j = jac.matrix();
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let det_scale = (j[0][0] * j[1][1]).abs() + (j[0][1] * j[1][0]).abs();
        if !(det.abs() > 1e-14 * det_scale) {
            return Err(Error::SingularJacobian { x, y });
        }
        // Unknowns ordered (y, x) to match the columns.
        let dy = (-r[0] * j[1][1] + r[1] * j[0][1]) / det;
        let dx = (-r[1] * j[0][0] + r[0] * j[1][0]) / det;
        let current = norm(r);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let (nx, ny) = (x + step * dx, y + step * dy);
            if nx >= 0.0 && ny > nx && landscape.moment(nx, ny, 0) > 0.0 {
                let nr = saturated_residuals(landscape, q, t, nx, ny);
                if norm(nr) < current {
                    accepted = Some((nx, ny, nr));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((nx, ny, nr)) => {
                x = nx;
                y = ny;
                r = nr;
            }
            None => {
                return Err(Error::NonConvergence {
                    solver: "newton (damping exhausted)",
                    iterations: iter,
                    residual: max_abs(r),
                })
            }
        }
    }
    Err(Error::NonConvergence {
        solver: "newton",
        iterations: MAX_NEWTON_ITER,
        residual: max_abs(r),
    })
}

fn saturated_diagnostics(q: f64, x: f64, y: f64, r: [f64; 2], iterations: usize) -> SolverDiagnostics {
    let lambda2 = 1.0 / (y - x);
    SolverDiagnostics {
        case: SolveCase::Saturated,
        lambda1: y * lambda2 - q,
        lambda2: Some(lambda2),
        demand_residual: r[0],
        spend_residual: r[1],
        iterations,
        notes: vec![],
    }
}

/// Price where the unsaturated form first touches saturation at `p = 0`
/// (`z·p_max = 1`), and the spend per impression there.
fn case_boundary(landscape: &Landscape, q: f64) -> Result<(f64, f64)> {
    // h(p) = F(p) − M1(0, p)/p increases from 0 towards 1.
    let h = |p: f64| landscape.moment(0.0, p, 0) - landscape.moment(0.0, p, 1) / p - q;
    let lo = landscape.quantile_unchecked(q).max(f64::MIN_POSITIVE);
    let mut hi = lo.max(landscape.mean()) * 2.0;
    let mut expansions = 0;
    while h(hi) < 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::NonConvergence {
                solver: "case boundary bracket",
                iterations: expansions,
                residual: h(hi).abs(),
            });
        }
    }
    let pm = brent(h, lo, hi, 1e-15 * hi, 300)?;
    let spend = landscape.moment(0.0, pm, 1) - landscape.moment(0.0, pm, 2) / pm;
    Ok((pm, spend / q))
}

/// Spend per impression of the unsaturated linear form with cutoff `p_max`.
fn linear_ratio(landscape: &Landscape, pm: f64) -> f64 {
    let m0 = landscape.moment(0.0, pm, 0);
    let m1 = landscape.moment(0.0, pm, 1);
    let m2 = landscape.moment(0.0, pm, 2);
    (pm * m1 - m2) / (pm * m0 - m1)
}

fn solve_linear(landscape: &Landscape, q: f64, t: f64, pm_boundary: f64) -> Result<Solution> {
    let mut lo = pm_boundary;
    let mut hi = pm_boundary * 2.0;
    let mut expansions = 0;
    while linear_ratio(landscape, hi) < t {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 1100 || !hi.is_finite() {
            return Err(Error::NonConvergence {
                solver: "p_max bracket",
                iterations: expansions,
                residual: t - linear_ratio(landscape, lo),
            });
        }
    }
    let mut iterations = 0;
    while hi - lo > BISECT_REL_WIDTH * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if linear_ratio(landscape, mid) < t {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let pm = 0.5 * (lo + hi);
    let z = q / (pm * landscape.moment(0.0, pm, 0) - landscape.moment(0.0, pm, 1));
    let allocation = Allocation::new(AllocationForm::L2Linear { z, p_max: pm }, 1.0, q);
    let r = [
        allocation.demand_fraction(landscape) - q,
        allocation.spend_fraction(landscape) - q * t,
    ];
    Ok(Solution {
        allocation,
        diagnostics: SolverDiagnostics {
            case: SolveCase::Linear,
            lambda1: z * pm - q,
            lambda2: Some(z),
            demand_residual: r[0],
            spend_residual: r[1],
            iterations,
            notes: vec![],
        },
    })
}

/// Demand at `(x, y)` increases in `y`; returns the `y ≥ x` meeting demand `q`.
fn demand_matching_pmax(landscape: &Landscape, q: f64, x: f64, y_cap: f64) -> Result<f64> {
    let g = |y: f64| {
        if y <= x {
            landscape.moment(0.0, x, 0) - q
        } else {
            saturated_residuals(landscape, q, 0.0, x, y)[0]
        }
    };
    if g(x) >= 0.0 {
        return Ok(x);
    }
    let mut hi = y_cap.max(x * 2.0).max(f64::MIN_POSITIVE);
    let mut n = 0;
    while g(hi) < 0.0 {
        hi *= 2.0;
        n += 1;
        if n > 200 {
            return Err(Error::NonConvergence {
                solver: "p_max for demand",
                iterations: n,
                residual: g(hi).abs(),
            });
        }
    }
    brent(g, x, hi, 1e-15 * hi, 300)
}

/// Robust fallback: along the demand curve `y(x)`, spend falls as `x` rises,
/// so `x` is found by a one-dimensional root find.
fn nested_solve(
    landscape: &Landscape,
    q: f64,
    t: f64,
    pm_boundary: f64,
) -> Result<(f64, f64)> {
    let pq = landscape.quantile_unchecked(q);
    let spend_gap = |x: f64| -> f64 {
        match demand_matching_pmax(landscape, q, x, pm_boundary) {
            Ok(y) if y > x => saturated_residuals(landscape, q, t, x, y)[1],
            Ok(_) => landscape.moment(0.0, x, 1) - q * t,
            Err(_) => f64::NAN,
        }
    };
    let x = brent(spend_gap, 0.0, pq, 1e-15 * pq.max(1.0), 300)?;
    let y = demand_matching_pmax(landscape, q, x, pm_boundary)?;
    Ok((x, y))
}

/// L2-optimal allocation for demand `d` of supply `s` at average spend `t`.
pub fn solve_l2(landscape: &Landscape, d: f64, s: f64, t: f64) -> Result<Solution> {
    let range = feasible_spend_range(landscape, d, s)?;
    if !t.is_finite() {
        return Err(Error::invalid("target_spend", "must be finite"));
    }
    let q = d / s;
    let finish = |mut sol: Solution| {
        sol.allocation.supply = s;
        sol.allocation.demand = d;
        sol
    };
    if q >= 1.0 {
        return Ok(finish(flat_solution(landscape, q, t, SolveCase::FullSupply)));
    }
    if t < range.t_min * (1.0 - 1e-12) {
        return Err(Error::Infeasible {
            target: t,
            t_min: range.t_min,
            t_bar: range.t_bar,
        });
    }
    if t >= range.t_bar {
        let mut sol = flat_solution(landscape, q, t, SolveCase::Flat);
        if t > range.t_bar {
            sol.diagnostics
                .notes
                .push(format!("target spend {t} above mean price {}; spend constraint slack", range.t_bar));
        }
        return Ok(finish(sol));
    }
    if t <= range.t_min * (1.0 + 1e-12) {
        return Ok(finish(step_solution(landscape, q, t)));
    }
    let (pm_boundary, t_boundary) = case_boundary(landscape, q)?;
    if t >= t_boundary {
        return solve_linear(landscape, q, t, pm_boundary).map(finish);
    }
    let pq = landscape.quantile_unchecked(q);
    let x0 = 0.5 * pq;
    let y0 = landscape.quantile_unchecked((q + 0.5 * (1.0 - q)).min(1.0 - 1e-9));
    let (x, y, diagnostics) = match newton_core(landscape, q, t, x0, y0) {
        Ok(v) => v,
        Err(err) if err.is_convergence_failure() => {
            let (xb, yb) = nested_solve(landscape, q, t, pm_boundary)?;
            let (x, y, mut diag) = match newton_core(landscape, q, t, xb, yb) {
                Ok(v) => v,
                Err(_) => {
                    let r = saturated_residuals(landscape, q, t, xb, yb);
                    (xb, yb, saturated_diagnostics(q, xb, yb, r, 0))
                }
            };
            diag.notes.push(format!("newton from default start failed ({err}); used nested bisection"));
            (x, y, diag)
        }
        Err(err) => return Err(err),
    };
    if max_abs([diagnostics.demand_residual, diagnostics.spend_residual]) > 1e-8 {
        return Err(Error::NonConvergence {
            solver: "saturated l2",
            iterations: diagnostics.iterations,
            residual: max_abs([diagnostics.demand_residual, diagnostics.spend_residual]),
        });
    }
    Ok(finish(Solution {
        allocation: Allocation::new(AllocationForm::L2Saturated { p_min: x, p_max: y }, 1.0, q),
        diagnostics,
    }))
}

pub(crate) fn flat_solution(landscape: &Landscape, q: f64, t: f64, case: SolveCase) -> Solution {
    let allocation = Allocation::flat(q, 1.0, q);
    let spend = allocation.spend_fraction(landscape);
    Solution {
        diagnostics: SolverDiagnostics {
            case,
            lambda1: 0.0,
            lambda2: Some(0.0),
            demand_residual: allocation.demand_fraction(landscape) - q,
            spend_residual: (spend - q * t).max(0.0),
            iterations: 0,
            notes: vec![],
        },
        allocation,
    }
}

pub(crate) fn step_solution(landscape: &Landscape, q: f64, t: f64) -> Solution {
    let pq = landscape.quantile_unchecked(q);
    let allocation = Allocation::step(pq, 1.0, q);
    Solution {
        diagnostics: SolverDiagnostics {
            case: SolveCase::Step,
            lambda1: 1.0 - q,
            lambda2: None,
            demand_residual: allocation.demand_fraction(landscape) - q,
            spend_residual: allocation.spend_fraction(landscape) - q * t,
            iterations: 0,
            notes: vec![],
        },
        allocation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform() -> Landscape {
        Landscape::uniform(0.0, 1.0).unwrap()
    }

    fn params(a: &Allocation) -> (f64, f64) {
        match a.form {
            AllocationForm::L2Saturated { p_min, p_max } => (p_min, p_max),
            AllocationForm::L2Linear { z, p_max } => (z, p_max),
            ref f => panic!("unexpected form {f:?}"),
        }
    }

    /// Grid search over `(x, y)` minimizing quadrature residuals.
    fn grid_oracle(l: &Landscape, q: f64, t: f64, lo: f64, hi: f64, n: usize) -> (f64, f64, f64) {
        let cell = (hi - lo) / n as f64;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=n {
            let x = lo + i as f64 * cell;
            for j in 0..=n {
                let y = lo + j as f64 * cell;
                if y <= x {
                    continue;
                }
                let a = |p: f64| ((y - p) / (y - x)).clamp(0.0, 1.0);
                let dem = l.integrate_with_breaks(a, 0.0, f64::INFINITY, &[x, y]) - q;
                let sp = l.integrate_with_breaks(|p| p * a(p), 0.0, f64::INFINITY, &[x, y]) - q * t;
                let r = dem.abs() + sp.abs();
                if r < best.0 {
                    best = (r, x, y);
                }
            }
        }
        (best.1, best.2, cell)
    }

    #[test]
    fn spend_range_examples() {
        let r = feasible_spend_range(&uniform(), 0.5, 1.0).unwrap();
        assert!((r.t_min - 0.25).abs() < 1e-15 && (r.t_bar - 0.5).abs() < 1e-15);
        let r = feasible_spend_range(&uniform(), 1.0, 1.0).unwrap();
        assert_eq!(r.t_min, r.t_bar);
        let e = Landscape::exponential(1.0).unwrap();
        let r = feasible_spend_range(&e, 0.999_999, 1.0).unwrap();
        assert!((r.t_min - 1.0).abs() < 1e-4 && (r.t_bar - 1.0).abs() < 1e-15);
        assert!(matches!(
            feasible_spend_range(&uniform(), 2.0, 1.0),
            Err(Error::OverDemand { .. })
        ));
        let degenerate = Landscape::fit_empirical(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(
            feasible_spend_range(&degenerate, 0.5, 1.0),
            Err(Error::DegenerateLandscape)
        );
    }

    #[test]
    fn saturated_benchmark() {
        let sol = solve_l2(&uniform(), 0.5, 1.0, 0.28).unwrap();
        let (x, y) = params(&sol.allocation);
        assert!((x - 0.2).abs() < 1e-9 && (y - 0.8).abs() < 1e-9, "{x} {y}");
        assert_eq!(sol.diagnostics.case, SolveCase::Saturated);
        let (gx, gy, cell) = grid_oracle(&uniform(), 0.5, 0.28, 0.0, 1.0, 100);
        assert!((gx - x).abs() <= cell && (gy - y).abs() <= cell);
    }

    #[test]
    fn linear_benchmark() {
        let sol = solve_l2(&uniform(), 0.5, 1.0, 0.4).unwrap();
        let (z, pm) = params(&sol.allocation);
        assert!((z - 0.6).abs() < 1e-9 && (pm - 4.0 / 3.0).abs() < 1e-9, "{z} {pm}");
        assert_eq!(sol.diagnostics.case, SolveCase::Linear);
        // Oracle: grid over (z, p_max) with quadrature residuals.
        let l = uniform();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 1..=200 {
            let zz = i as f64 * 0.005;
            for j in 1..=200 {
                let p = j as f64 * 0.01;
                let a = |x: f64| (zz * (p - x)).clamp(0.0, 1.0);
                let r = (l.integrate_with_breaks(a, 0.0, 1.0, &[p]) - 0.5).abs()
                    + (l.integrate_with_breaks(|x| x * a(x), 0.0, 1.0, &[p]) - 0.2).abs();
                if r < best.0 {
                    best = (r, zz, p);
                }
            }
        }
        assert!((best.1 - z).abs() <= 0.00501 && (best.2 - pm).abs() <= 0.0101, "{best:?}");
    }

    #[test]
    fn endpoints() {
        let l = Landscape::lognormal(0.0, 0.5).unwrap();
        let range = feasible_spend_range(&l, 0.3, 1.0).unwrap();
        let flat = solve_l2(&l, 0.3, 1.0, range.t_bar).unwrap();
        assert_eq!(flat.allocation.form, AllocationForm::Flat { level: 0.3 });
        let above = solve_l2(&l, 0.3, 1.0, 2.0 * range.t_bar).unwrap();
        assert_eq!(above.allocation.form, AllocationForm::Flat { level: 0.3 });
        assert_eq!(above.diagnostics.notes.len(), 1);
        let step = solve_l2(&l, 0.3, 1.0, range.t_min).unwrap();
        let pq = l.quantile(0.3).unwrap();
        assert_eq!(
            step.allocation.form,
            AllocationForm::L2Saturated { p_min: pq, p_max: pq }
        );
        assert_eq!(step.diagnostics.lambda2, None);
        let err = solve_l2(&l, 0.3, 1.0, 0.9 * range.t_min).unwrap_err();
        assert!(err.is_infeasible());
        let full = solve_l2(&l, 1.0, 1.0, 0.1).unwrap();
        assert_eq!(full.allocation.form, AllocationForm::Flat { level: 1.0 });
    }

    #[test]
    fn case_boundary_coherence() {
        let (pm, t0) = case_boundary(&uniform(), 0.5).unwrap();
        assert!((pm - 1.0).abs() < 1e-12 && (t0 - 1.0 / 3.0).abs() < 1e-12);
        let lin = solve_l2(&uniform(), 0.5, 1.0, 1.0 / 3.0 + 1e-9).unwrap();
        let (z, pm) = params(&lin.allocation);
        assert!((z - 1.0).abs() < 1e-6 && (pm - 1.0).abs() < 1e-6);
        let sat = solve_l2(&uniform(), 0.5, 1.0, 1.0 / 3.0 - 1e-9).unwrap();
        let (x, y) = params(&sat.allocation);
        assert!(x.abs() < 1e-6 && (y - 1.0).abs() < 1e-6, "{x} {y}");
    }

    #[test]
    fn jacobian_benchmark() {
        let j = jacobian(&uniform(), 0.2, 0.8).unwrap();
        assert!((j.prefactor - 5.0 / 3.0).abs() < 1e-14);
        let want = [[0.3, 0.3], [0.18, 0.12]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((j.bracket[r][c] - want[r][c]).abs() < 1e-14);
            }
        }
        assert!((j.bracket_determinant() + 0.018).abs() < 1e-15);
        assert!(jacobian(&uniform(), 0.5, 0.5).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let l = Landscape::lognormal(0.0, 0.6).unwrap();
        let (x, y, h) = (0.4, 1.7, 1e-5);
        let j = jacobian(&l, x, y).unwrap().matrix();
        let r = |x: f64, y: f64| saturated_residuals(&l, 0.3, 0.7, x, y);
        for row in 0..2 {
            let dy = (r(x, y + h)[row] - r(x, y - h)[row]) / (2.0 * h);
            let dx = (r(x + h, y)[row] - r(x - h, y)[row]) / (2.0 * h);
            assert!((dy - j[row][0]).abs() <= 1e-5 * j[row][0].abs());
            assert!((dx - j[row][1]).abs() <= 1e-5 * j[row][1].abs());
        }
    }

    #[test]
    fn newton_examples() {
        let (x, y, _) = newton_solve_pmin_pmax(&uniform(), 0.5, 1.0, 0.28, 0.1, 0.9).unwrap();
        assert!((x - 0.2).abs() < 1e-9 && (y - 0.8).abs() < 1e-9);
        let (_, _, diag) = newton_solve_pmin_pmax(&uniform(), 0.5, 1.0, 0.28, 0.2, 0.8).unwrap();
        assert!(diag.iterations <= 1);
        assert!(diag.demand_residual.abs() < 1e-10 && diag.spend_residual.abs() < 1e-10);
        let err = newton_solve_pmin_pmax(&uniform(), 0.5, 1.0, 0.25, 0.1, 0.9).unwrap_err();
        assert!(matches!(err, Error::DegenerateWindow { .. }));
    }

    #[test]
    fn newton_from_random_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x0 = rng.random_range(0.0..0.5);
            let y0 = rng.random_range(0.5..1.0);
            let (x, y, _) = newton_solve_pmin_pmax(&uniform(), 0.5, 1.0, 0.28, x0, y0).unwrap();
            assert!((x - 0.2).abs() < 1e-9 && (y - 0.8).abs() < 1e-9, "from ({x0}, {y0})");
        }
    }

    #[test]
    fn nested_fallback_agrees_with_newton() {
        let l = Landscape::lognormal(0.0, 1.0).unwrap();
        let q = 0.4;
        let (pmb, tb) = case_boundary(&l, q).unwrap();
        let range = spend_range_for_fraction(&l, q);
        let t = 0.5 * (range.t_min + tb);
        let (x, y) = nested_solve(&l, q, t, pmb).unwrap();
        let sol = solve_l2(&l, q, 1.0, t).unwrap();
        let (nx, ny) = params(&sol.allocation);
        assert!((x - nx).abs() < 1e-8 && (y - ny).abs() < 1e-8);
    }

    #[test]
    fn monotone_dial() {
        let l = Landscape::lognormal(0.0, 0.8).unwrap();
        let q = 0.5;
        let range = spend_range_for_fraction(&l, q);
        let mut last_pmax = 0.0;
        let mut last_pmin = f64::INFINITY;
        for i in 0..=24 {
            let t = range.t_min + (range.t_bar - range.t_min) * i as f64 / 25.0;
            let sol = solve_l2(&l, q, 1.0, t).unwrap();
            let (pmin, pmax) = match sol.allocation.form {
                AllocationForm::L2Saturated { p_min, p_max } => (p_min, p_max),
                AllocationForm::L2Linear { p_max, .. } => (0.0, p_max),
                ref f => panic!("{f:?}"),
            };
            assert!(pmax >= last_pmax - 1e-9, "p_max fell at t={t}");
            assert!(pmin <= last_pmin + 1e-9, "p_min rose at t={t}");
            last_pmax = pmax;
            last_pmin = pmin;
        }
    }

    #[test]
    fn linear_ratio_is_monotone() {
        for l in [uniform(), Landscape::lognormal(0.0, 1.5).unwrap(), Landscape::exponential(2.0).unwrap()] {
            let (pm0, _) = case_boundary(&l, 0.3).unwrap();
            let mut last = 0.0;
            for i in 0..200 {
                let pm = pm0 * (1.0 + i as f64 * 0.05);
                let r = linear_ratio(&l, pm);
                assert!(r >= last - 1e-12);
                last = r;
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn landscape() -> impl Strategy<Value = Landscape> {
            prop_oneof![
                (-0.5f64..0.5, 0.2f64..1.5).prop_map(|(m, s)| Landscape::lognormal(m, s).unwrap()),
                (0.5f64..3.0).prop_map(|g| Landscape::exponential(g).unwrap()),
                (0.0f64..0.5, 0.5f64..2.0).prop_map(|(a, w)| Landscape::uniform(a, a + w).unwrap()),
            ]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn solutions_meet_constraints(l in landscape(), q in 0.05f64..0.95, u in 0.0f64..1.0) {
                let range = spend_range_for_fraction(&l, q);
                let t = range.t_min + u * (range.t_bar - range.t_min);
                let sol = solve_l2(&l, q, 1.0, t).unwrap();
                let a = &sol.allocation;
                a.validate().unwrap();
                let dem = a.demand_fraction(&l);
                prop_assert!((dem - q).abs() <= 1e-6 * q);
                if t < range.t_bar {
                    let sp = a.spend_fraction(&l);
                    prop_assert!((sp - q * t).abs() <= 1e-6 * q * t);
                }
                let mut prev = f64::INFINITY;
                for i in 0..200 {
                    let v = a.value(i as f64 * 0.02);
                    prop_assert!((0.0..=1.0).contains(&v) && v <= prev);
                    prev = v;
                }
                if let Some(l2) = sol.diagnostics.lambda2 {
                    prop_assert!(l2 >= 0.0);
                }
            }

            #[test]
            fn jacobian_bracket_signs(l in landscape(), a in 0.05f64..1.0, w in 0.05f64..1.0) {
                let (x, y) = (a, a + w);
                if l.moment(x, y, 0) > 1e-6 {
                    let j = jacobian(&l, x, y).unwrap();
                    for row in j.bracket {
                        for v in row {
                            prop_assert!(v >= -1e-12);
                        }
                    }
                    prop_assert!(j.bracket_determinant() < 0.0);
                }
            }
        }
    }
}

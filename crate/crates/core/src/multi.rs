//! Several contracts sharing one supply.
//!
//! Contracts are first solved independently. If their allocations fit within
//! supply at every price the problem decouples. Otherwise the coupled L2
//! problem is solved through its dual: for multipliers `(λ1_j, λ2_j)` the
//! pointwise optimum is the projection of `y_j(p) = q_j + λ1_j − λ2_j p` onto
//! `{x ≥ 0, Σx ≤ 1}`. That projection is piecewise linear in `p`, so the dual,
//! its gradient and Hessian are exact sums of truncated moments. The dual is
//! concave and is maximized by projected Newton with `λ2 ≥ 0`.

use serde::{Deserialize, Serialize};

use crate::allocation::{Allocation, AllocationForm};
use crate::error::{Error, Result};
use crate::landscape::Landscape;
use crate::single_l2::{solve_l2, spend_range_for_fraction};

const MAX_CONTRACTS: usize = 64;
const MAX_DUAL_ITER: usize = 200;
const GRAD_TOL: f64 = 1e-10;
/// Accepted when the line search can no longer improve the dual.
const STALL_TOL: f64 = 1e-8;
const SLOPE_TOL: f64 = 1e-6;
const KAPPA_CAP: f64 = 1e3;
const KAPPA_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub demand: f64,
    pub target_spend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractSet {
    pub supply: f64,
    pub contracts: Vec<Contract>,
}

impl ContractSet {
    /// Same contracts with every target spend multiplied by `kappa`.
    pub fn scaled(&self, kappa: f64) -> ContractSet {
        ContractSet {
            supply: self.supply,
            contracts: self
                .contracts
                .iter()
                .map(|c| Contract {
                    demand: c.demand,
                    target_spend: c.target_spend * kappa,
                })
                .collect(),
        }
    }

    fn validate(&self, landscape: &Landscape) -> Result<()> {
        if !(self.supply > 0.0 && self.supply.is_finite()) {
            return Err(Error::invalid("supply", "must be positive and finite"));
        }
        if self.contracts.len() > MAX_CONTRACTS {
            return Err(Error::invalid("contracts", format!("at most {MAX_CONTRACTS} contracts")));
        }
        if landscape.is_degenerate() {
            return Err(Error::DegenerateLandscape);
        }
        let mut total = 0.0;
        for c in &self.contracts {
            if !(c.demand > 0.0 && c.demand.is_finite()) {
                return Err(Error::invalid("demands", "each demand must be positive and finite"));
            }
            if !c.target_spend.is_finite() {
                return Err(Error::invalid("target_spends", "must be finite"));
            }
            total += c.demand;
        }
        if total > self.supply {
            return Err(Error::OverDemand {
                demand: total,
                supply: self.supply,
            });
        }
        let mut budget = 0.0;
        for (j, c) in self.contracts.iter().enumerate() {
            let q = c.demand / self.supply;
            let range = spend_range_for_fraction(landscape, q);
            if c.target_spend < range.t_min * (1.0 - 1e-12) {
                return Err(Error::InfeasibleContracts {
                    reason: format!(
                        "contract {j}: target spend {} below its minimum {}",
                        c.target_spend, range.t_min
                    ),
                });
            }
            budget += q * c.target_spend.min(range.t_bar);
        }
        let q_total = total / self.supply;
        if q_total < 1.0 {
            let p = landscape.quantile_unchecked(q_total);
            let cheapest = landscape.moment(0.0, p, 1);
            if budget < cheapest * (1.0 - 1e-12) {
                return Err(Error::InfeasibleContracts {
                    reason: format!(
                        "combined spend {budget} below the cheapest way {cheapest} to buy the combined demand"
                    ),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiCase {
    /// Independent solutions fit within supply.
    Decoupled,
    /// Supply binds below `p_star`; all allocations fall with a shared slope above it.
    CommonSlope,
    /// Some contract's optimal allocation increases somewhere.
    NotDecentralizable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiAllocation {
    pub allocations: Vec<Allocation>,
    pub case: MultiCase,
    pub decentralizable: bool,
    pub diagnosis: String,
    /// Infimum of prices where total allocation is below supply.
    pub p_star: f64,
    /// Shared slope `w` of the allocations above `p_star`, when one exists.
    pub common_slope: Option<f64>,
    /// Allocation levels `c_j = a_j(0)/s`.
    pub levels: Vec<f64>,
    /// Price beyond which each allocation is zero (`+∞` if never).
    pub p_max: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub iterations: usize,
}

impl MultiAllocation {
    /// Total allocation `A(p)/s`.
    pub fn total(&self, p: f64) -> f64 {
        self.allocations.iter().map(|a| a.value(p)).sum()
    }
}

/// Active-set pattern of the projection on an interval of prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pattern {
    capped: bool,
    active: u64,
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    a: f64,
    b: f64,
    pattern: Pattern,
}

struct Dual<'a> {
    landscape: &'a Landscape,
    q: Vec<f64>,
    t: Vec<f64>,
}

struct Eval {
    value: f64,
    grad: Vec<f64>,
    /// Negated Hessian (positive semidefinite).
    curvature: Vec<Vec<f64>>,
    pieces: Vec<Piece>,
}

impl Dual<'_> {
    fn m(&self) -> usize {
        self.q.len()
    }

    fn pattern_at(&self, theta: &[f64], p: f64) -> Pattern {
        let m = self.m();
        let y: Vec<f64> = (0..m).map(|j| self.q[j] + theta[j] - theta[m + j] * p).collect();
        let positive: f64 = y.iter().filter(|v| **v > 0.0).sum();
        if positive <= 1.0 {
            let active = (0..m).filter(|&j| y[j] > 0.0).fold(0u64, |acc, j| acc | (1 << j));
            return Pattern {
                capped: false,
                active,
            };
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&i, &j| y[j].total_cmp(&y[i]));
        let mut sum = 0.0;
        let mut k = 0;
        for (idx, &j) in order.iter().enumerate() {
            let tau = (sum + y[j] - 1.0) / (idx + 1) as f64;
            if y[j] > tau {
                sum += y[j];
                k = idx + 1;
            } else {
                break;
            }
        }
        let active = order[..k].iter().fold(0u64, |acc, &j| acc | (1 << j));
        Pattern {
            capped: true,
            active,
        }
    }

    /// `x_j(p) = α_j + β_j p` on a region with the given pattern.
    fn coefficients(&self, theta: &[f64], pattern: Pattern) -> Vec<(f64, f64)> {
        let m = self.m();
        let members: Vec<usize> = (0..m).filter(|&j| pattern.active >> j & 1 == 1).collect();
        let n = members.len() as f64;
        let (shift_c, shift_s) = if pattern.capped && !members.is_empty() {
            let sc: f64 = members.iter().map(|&j| self.q[j] + theta[j]).sum();
            let ss: f64 = members.iter().map(|&j| theta[m + j]).sum();
            ((sc - 1.0) / n, ss / n)
        } else {
            (0.0, 0.0)
        };
        (0..m)
            .map(|j| {
                if pattern.active >> j & 1 == 1 {
                    (self.q[j] + theta[j] - shift_c, -theta[m + j] + shift_s)
                } else {
                    (0.0, 0.0)
                }
            })
            .collect()
    }

    fn pieces(&self, theta: &[f64]) -> Vec<Piece> {
        let m = self.m();
        let mut grid = vec![0.0];
        let mut end = 0.0f64;
        for j in 0..m {
            let lam = theta[m + j];
            let c = self.q[j] + theta[j];
            if lam > 0.0 && c > 0.0 {
                let root = c / lam;
                grid.push(root);
                end = end.max(root);
            }
        }
        let cuts = 32;
        for i in 1..cuts {
            grid.push(end * i as f64 / cuts as f64);
        }
        grid.push(end);
        grid.sort_by(f64::total_cmp);
        grid.dedup();

        let mut pieces: Vec<Piece> = Vec::new();
        let push = |pieces: &mut Vec<Piece>, a: f64, b: f64, pattern: Pattern| {
            if let Some(last) = pieces.last_mut() {
                if last.pattern == pattern {
                    last.b = b;
                    return;
                }
            }
            pieces.push(Piece { a, b, pattern });
        };
        let tol = 1e-15 * end.max(1e-300);
        let mut stack: Vec<(f64, Pattern, f64, Pattern)> = Vec::new();
        for w in grid.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            stack.push((a, self.pattern_at(theta, a), b, self.pattern_at(theta, b)));
            while let Some((a, pa, b, pb)) = stack.pop() {
                if pa == pb {
                    push(&mut pieces, a, b, pa);
                } else if b - a <= tol {
                    let mid = 0.5 * (a + b);
                    push(&mut pieces, a, mid, pa);
                    push(&mut pieces, mid, b, pb);
                } else {
                    let mid = 0.5 * (a + b);
                    let pm = self.pattern_at(theta, mid);
                    // Right half is pushed first so the left half is handled first.
                    stack.push((mid, pm, b, pb));
                    stack.push((a, pa, mid, pm));
                }
            }
        }
        let tail = self.pattern_at(theta, 2.0 * end + 1.0);
        push(&mut pieces, end, f64::INFINITY, tail);
        pieces.retain(|pc| pc.b > pc.a);
        pieces
    }

    fn evaluate(&self, theta: &[f64]) -> Eval {
        let m = self.m();
        let pieces = self.pieces(theta);
        let mut value = 0.0;
        let mut demand = vec![0.0; m];
        let mut spend = vec![0.0; m];
        let mut curvature = vec![vec![0.0; 2 * m]; 2 * m];
        for pc in &pieces {
            let mom = [
                self.landscape.moment(pc.a, pc.b, 0),
                self.landscape.moment(pc.a, pc.b, 1),
                self.landscape.moment(pc.a, pc.b, 2),
            ];
            if mom[0] == 0.0 {
                continue;
            }
            let coef = self.coefficients(theta, pc.pattern);
            let members: Vec<usize> = (0..m).filter(|&j| pc.pattern.active >> j & 1 == 1).collect();
            let inv_n = if pc.pattern.capped && !members.is_empty() {
                1.0 / members.len() as f64
            } else {
                0.0
            };
            for &j in &members {
                let (al, be) = coef[j];
                let c = self.q[j] + theta[j];
                let lam = theta[m + j];
                value += 0.5 * (al * al * mom[0] + 2.0 * al * be * mom[1] + be * be * mom[2])
                    - (al * c * mom[0] + (be * c - al * lam) * mom[1] - be * lam * mom[2]);
                demand[j] += al * mom[0] + be * mom[1];
                spend[j] += al * mom[1] + be * mom[2];
                for &l in &members {
                    let d = if j == l { 1.0 } else { 0.0 } - inv_n;
                    curvature[j][l] += d * mom[0];
                    curvature[j][m + l] -= d * mom[1];
                    curvature[m + j][l] -= d * mom[1];
                    curvature[m + j][m + l] += d * mom[2];
                }
            }
        }
        let mut grad = vec![0.0; 2 * m];
        for j in 0..m {
            value += 0.5 * self.q[j] * self.q[j] + theta[j] * self.q[j] - theta[m + j] * self.q[j] * self.t[j];
            grad[j] = self.q[j] - demand[j];
            grad[m + j] = spend[j] - self.q[j] * self.t[j];
        }
        Eval {
            value,
            grad,
            curvature,
            pieces,
        }
    }

    /// Largest scaled KKT violation: demand error relative to `q_j`, spend
    /// excess (or slack while `λ2_j > 0`) relative to `q_j t_j`.
    fn residual(&self, theta: &[f64], grad: &[f64]) -> f64 {
        let m = self.m();
        (0..m)
            .map(|j| {
                let spend_scale = (self.q[j] * self.t[j]).abs().max(1e-300);
                let spend = if theta[m + j] > 0.0 {
                    grad[m + j].abs()
                } else {
                    grad[m + j].max(0.0)
                };
                (grad[j].abs() / self.q[j]).max(spend / spend_scale)
            })
            .fold(0.0, f64::max)
    }

    fn maximize(&self, mut theta: Vec<f64>) -> Result<(Vec<f64>, Eval, usize)> {
        let m = self.m();
        let mut eval = self.evaluate(&theta);
        for iter in 0..MAX_DUAL_ITER {
            if self.residual(&theta, &eval.grad) <= GRAD_TOL {
                return Ok((theta, eval, iter));
            }
            // λ2_j pinned at zero while the gradient pushes it negative.
            let free: Vec<usize> = (0..2 * m)
                .filter(|&i| i < m || theta[i] > 0.0 || eval.grad[i] > 0.0)
                .collect();
            let scale = free
                .iter()
                .map(|&i| eval.curvature[i][i].abs())
                .fold(0.0f64, f64::max)
                .max(1e-300);
            let mut mu = 1e-12 * scale;
            let mut improved = false;
            for _ in 0..8 {
                let k = free.len();
                let mut mat = vec![vec![0.0; k]; k];
                let mut rhs = vec![0.0; k];
                for (r, &i) in free.iter().enumerate() {
                    for (c, &jj) in free.iter().enumerate() {
                        mat[r][c] = eval.curvature[i][jj];
                    }
                    mat[r][r] += mu;
                    rhs[r] = eval.grad[i];
                }
                let Some(step) = solve_dense(mat, rhs) else {
                    mu *= 1e3;
                    continue;
                };
                let mut direction = vec![0.0; 2 * m];
                for (r, &i) in free.iter().enumerate() {
                    direction[i] = step[r];
                }
                let current = self.residual(&theta, &eval.grad);
                let mut alpha = 1.0;
                for _ in 0..60 {
                    let mut trial: Vec<f64> = theta.iter().zip(&direction).map(|(t, d)| t + alpha * d).collect();
                    for v in &mut trial[m..] {
                        *v = v.max(0.0);
                    }
                    let gain: f64 = trial
                        .iter()
                        .zip(&theta)
                        .zip(&eval.grad)
                        .map(|((a, b), g)| (a - b) * g)
                        .sum();
                    let next = self.evaluate(&trial);
                    let ascent = next.value > eval.value && next.value >= eval.value + 1e-4 * gain;
                    // Near the optimum the gain drops below the rounding of D.
                    let polish = next.value >= eval.value - 1e-14 * eval.value.abs()
                        && self.residual(&trial, &next.grad) < 0.5 * current;
                    if next.value.is_finite() && (ascent || polish) {
                        improved = true;
                        theta = trial;
                        eval = next;
                        break;
                    }
                    alpha *= 0.5;
                }
                if improved {
                    break;
                }
                mu = mu.max(1e-12) * 1e3;
            }
            if !improved {
                break;
            }
        }
        let residual = self.residual(&theta, &eval.grad);
        if residual <= STALL_TOL {
            return Ok((theta, eval, MAX_DUAL_ITER));
        }
        Err(Error::NonConvergence {
            solver: "multi-contract dual newton",
            iterations: MAX_DUAL_ITER,
            residual,
        })
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[piv][col].abs() > 0.0) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
        if !x[row].is_finite() {
            return None;
        }
    }
    Some(x)
}

/// Jointly optimal allocations for a contract set, with the decentralizability verdict.
pub fn solve_multi(landscape: &Landscape, set: &ContractSet) -> Result<MultiAllocation> {
    set.validate(landscape)?;
    let s = set.supply;
    let m = set.contracts.len();
    let singles = set
        .contracts
        .iter()
        .map(|c| solve_l2(landscape, c.demand, s, c.target_spend))
        .collect::<Result<Vec<_>>>()?;
    let a0: f64 = singles.iter().map(|sol| sol.allocation.value(0.0)).sum();
    if a0 <= 1.0 + 1e-12 {
        let allocations: Vec<Allocation> = singles.iter().map(|sol| sol.allocation.clone()).collect();
        let p_max = allocations.iter().map(support_end).collect();
        let levels = allocations.iter().map(|a| a.value(0.0)).collect();
        return Ok(MultiAllocation {
            p_star: 0.0,
            common_slope: None,
            case: MultiCase::Decoupled,
            decentralizable: true,
            diagnosis: "independent solutions fit within supply".into(),
            levels,
            p_max,
            lambda1: singles.iter().map(|s| s.diagnostics.lambda1).collect(),
            lambda2: singles
                .iter()
                .map(|s| s.diagnostics.lambda2.unwrap_or(f64::INFINITY))
                .collect(),
            allocations,
            iterations: 0,
        });
    }

    let dual = Dual {
        landscape,
        q: set.contracts.iter().map(|c| c.demand / s).collect(),
        t: set.contracts.iter().map(|c| c.target_spend).collect(),
    };
    let mut theta = vec![0.0; 2 * m];
    for (j, sol) in singles.iter().enumerate() {
        theta[j] = sol.diagnostics.lambda1;
        theta[m + j] = match sol.diagnostics.lambda2 {
            Some(v) => v,
            // Step allocation: a steep finite slope around the cutoff price.
            None => {
                let pq = landscape.quantile_unchecked(dual.q[j]);
                10.0 / pq.max(landscape.mean() * 1e-3)
            }
        };
    }
    let (theta, eval, iterations) = dual.maximize(theta)?;

    let mut knots: Vec<f64> = eval.pieces.iter().map(|pc| pc.a).collect();
    if let Some(last) = eval.pieces.last() {
        if last.b.is_finite() {
            knots.push(last.b);
        }
    }
    let mut tables: Vec<Vec<[f64; 2]>> = vec![Vec::with_capacity(knots.len()); m];
    let mut max_rise = 0.0f64;
    let mut p_star = 0.0;
    let mut capped_prefix = true;
    let mut p_max = vec![0.0f64; m];
    for pc in &eval.pieces {
        let coef = dual.coefficients(&theta, pc.pattern);
        for j in 0..m {
            let (al, be) = coef[j];
            tables[j].push([pc.a, (al + be * pc.a).clamp(0.0, 1.0)]);
            if pc.pattern.active >> j & 1 == 1 {
                max_rise = max_rise.max(be);
                p_max[j] = pc.b;
            }
        }
        if capped_prefix && pc.pattern.capped {
            p_star = pc.b;
        } else {
            capped_prefix = false;
        }
    }
    if let Some(last) = eval.pieces.last() {
        if last.b.is_finite() {
            let coef = dual.coefficients(&theta, last.pattern);
            for j in 0..m {
                let (al, be) = coef[j];
                tables[j].push([last.b, (al + be * last.b).clamp(0.0, 1.0)]);
            }
        }
    }
    let lambda1: Vec<f64> = theta[..m].to_vec();
    let lambda2: Vec<f64> = theta[m..].to_vec();
    let lam_scale = lambda2.iter().fold(0.0f64, |a, &b| a.max(b)).max(1e-300);
    let decentralizable = max_rise <= SLOPE_TOL * lam_scale;
    if decentralizable {
        // Rounding can leave rises far below the slope tolerance.
        for table in &mut tables {
            let mut floor = f64::INFINITY;
            for point in table.iter_mut() {
                floor = floor.min(point[1]);
                point[1] = floor;
            }
        }
    }
    let allocations: Vec<Allocation> = tables
        .into_iter()
        .zip(&set.contracts)
        .map(|(points, c)| Allocation::new(AllocationForm::Tabulated { points }, s, c.demand))
        .collect();
    let levels: Vec<f64> = allocations.iter().map(|a| a.value(0.0)).collect();
    let (case, diagnosis, common_slope) = if decentralizable {
        let above: Vec<f64> = (0..m).filter(|&j| p_max[j] > p_star).map(|j| lambda2[j]).collect();
        let w = above.iter().sum::<f64>() / above.len().max(1) as f64;
        let spread = above.iter().fold(0.0f64, |acc, v| acc.max((v - w).abs()));
        let slope = (spread <= SLOPE_TOL * w.abs().max(1e-300)).then_some(w);
        (MultiCase::CommonSlope, "equal slope multipliers".to_string(), slope)
    } else {
        (
            MultiCase::NotDecentralizable,
            format!("unequal slope multipliers: {lambda2:?}"),
            None,
        )
    };
    Ok(MultiAllocation {
        allocations,
        case,
        decentralizable,
        diagnosis,
        p_star,
        common_slope,
        levels,
        p_max,
        lambda1,
        lambda2,
        iterations,
    })
}

fn support_end(a: &Allocation) -> f64 {
    match &a.form {
        AllocationForm::Flat { .. } | AllocationForm::KlUnsaturated { .. } | AllocationForm::KlExponential { .. } => {
            f64::INFINITY
        }
        AllocationForm::L2Linear { p_max, .. } | AllocationForm::L2Saturated { p_max, .. } => *p_max,
        AllocationForm::Tabulated { points } => {
            if points.last().is_some_and(|p| p[1] > 0.0) {
                f64::INFINITY
            } else {
                points
                    .iter()
                    .rev()
                    .find(|p| p[1] > 0.0)
                    .map_or(0.0, |p| p[0])
            }
        }
    }
}

/// Whether the optimal joint allocation can be implemented by independent bidding.
pub fn is_decentralizable(landscape: &Landscape, set: &ContractSet) -> Result<(bool, String)> {
    let sol = solve_multi(landscape, set)?;
    Ok((sol.decentralizable, sol.diagnosis))
}

/// Smallest uniform multiplier `κ ≥ 1` on target spends (to within 1e-6)
/// that makes the set decentralizable, assuming decentralizability is
/// monotone in `κ`.
pub fn scale_spends(landscape: &Landscape, set: &ContractSet) -> Result<(f64, ContractSet)> {
    if is_decentralizable(landscape, set)?.0 {
        return Ok((1.0, set.clone()));
    }
    if !is_decentralizable(landscape, &set.scaled(KAPPA_CAP))?.0 {
        return Err(Error::NoDecentralizingMultiplier { cap: KAPPA_CAP });
    }
    let (mut lo, mut hi) = (1.0, KAPPA_CAP);
    while hi - lo > KAPPA_TOL {
        let mid = 0.5 * (lo + hi);
        if is_decentralizable(landscape, &set.scaled(mid))?.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((hi, set.scaled(hi)))
}

//! Single-contract allocation closest to flat in KL divergence.
//!
//! The optimum has the form `a(p)/s = min{1, exp(λ (p0 − p))}`. For small `λ`
//! the exponential never reaches 1 on the support and is written
//! `scale · exp(−λ p)`; otherwise `p0 > 0` marks where saturation ends. The
//! spend per impression falls as `λ` grows, so `λ` is found by a bracketed
//! root find on `ln λ`, with `p0` (or `scale`) fixed by the demand constraint.

use crate::allocation::{Allocation, AllocationForm};
use crate::error::{Error, Result};
use crate::landscape::Landscape;
use crate::roots::brent;
use crate::single_l2::{
    feasible_spend_range, flat_solution, step_solution, Solution, SolveCase, SolverDiagnostics,
};

const LOG_LAMBDA_STEP: f64 = 4.0;
const LOG_LAMBDA_SPAN: f64 = 160.0;

/// Allocation with rate `λ` that meets demand fraction `q`.
fn demand_matched(landscape: &Landscape, q: f64, lambda: f64) -> Result<AllocationForm> {
    let m0 = landscape.tilted_moment(0.0, f64::INFINITY, 0, lambda, 0.0);
    if m0 >= q {
        return Ok(AllocationForm::KlUnsaturated {
            scale: q / m0,
            lambda,
        });
    }
    // Demand with saturation up to p0 increases in p0.
    let pq = landscape.quantile_unchecked(q);
    let demand = |p0: f64| {
        landscape.moment(0.0, p0, 0) + landscape.tilted_moment(p0, f64::INFINITY, 0, lambda, p0) - q
    };
    let p0 = brent(demand, 0.0, pq, 1e-15 * pq.max(1e-300), 400)?;
    Ok(AllocationForm::KlExponential { p0, lambda })
}

fn spend_per_impression(landscape: &Landscape, q: f64, form: &AllocationForm) -> f64 {
    Allocation::new(form.clone(), 1.0, q).spend_fraction(landscape) / q
}

/// KL-optimal allocation for demand `d` of supply `s` at average spend `t`.
pub fn solve_kl(landscape: &Landscape, d: f64, s: f64, t: f64) -> Result<Solution> {
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

    let evaluations = std::cell::Cell::new(0usize);
    let gap = |u: f64| -> f64 {
        evaluations.set(evaluations.get() + 1);
        match demand_matched(landscape, q, u.exp()) {
            Ok(form) => spend_per_impression(landscape, q, &form) - t,
            Err(_) => f64::NAN,
        }
    };
    let centre = -range.t_bar.ln();
    let (mut lo, mut hi) = (centre - LOG_LAMBDA_STEP, centre + LOG_LAMBDA_STEP);
    while gap(lo) < 0.0 {
        lo -= LOG_LAMBDA_STEP;
        if lo < centre - LOG_LAMBDA_SPAN {
            // Indistinguishable from the mean at this precision.
            return Ok(finish(flat_solution(landscape, q, t, SolveCase::Flat)));
        }
    }
    loop {
        let g = gap(hi);
        if g <= 0.0 {
            break;
        }
        if !g.is_finite() || hi > centre + LOG_LAMBDA_SPAN {
            return Err(Error::NonConvergence {
                solver: "kl rate bracket",
                iterations: evaluations.get(),
                residual: g.abs(),
            });
        }
        lo = hi;
        hi += LOG_LAMBDA_STEP;
    }
    let u = brent(&gap, lo, hi, 1e-14, 300)?;
    let lambda = u.exp();
    let form = demand_matched(landscape, q, lambda)?;
    let allocation = Allocation::new(form, 1.0, q);
    let demand_residual = allocation.demand_fraction(landscape) - q;
    let spend_residual = allocation.spend_fraction(landscape) - q * t;
    let (case, log_scale) = match allocation.form {
        AllocationForm::KlUnsaturated { scale, .. } => (SolveCase::KlUnsaturated, scale.ln()),
        AllocationForm::KlExponential { p0, .. } => (SolveCase::KlSaturated, lambda * p0),
        _ => unreachable!("demand_matched returns exponential forms"),
    };
    if demand_residual.abs().max(spend_residual.abs()) > 1e-8 {
        return Err(Error::NonConvergence {
            solver: "kl",
            iterations: evaluations.get(),
            residual: demand_residual.abs().max(spend_residual.abs()),
        });
    }
    Ok(finish(Solution {
        allocation,
        diagnostics: SolverDiagnostics {
            case,
            lambda1: log_scale - q.ln(),
            lambda2: Some(lambda),
            demand_residual,
            spend_residual,
            iterations: evaluations.get(),
            notes: vec![],
        },
    }))
}

/// Closed form on an exponential landscape with rate `gamma`, valid while the
/// allocation is unsaturated: `λ = 1/t − γ`, `z = γ t`, divergence `γt − 1 − ln γt`.
pub fn kl_exponential_closed_form(gamma: f64, d: f64, s: f64, t: f64) -> Result<(Allocation, f64)> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma", "must be positive and finite"));
    }
    let q = crate::single_l2::check_contract(d, s)?;
    let (lo, hi) = (q / gamma, 1.0 / gamma);
    let slack = 1e-12 * hi;
    if !(t >= lo - slack && t <= hi + slack) {
        return Err(Error::invalid(
            "target_spend",
            format!("closed form needs {lo} ≤ t ≤ {hi}, got {t}"),
        ));
    }
    let z = gamma * t;
    let lambda = (1.0 / t - gamma).max(0.0);
    let allocation = Allocation::new(
        AllocationForm::KlUnsaturated {
            scale: q / z,
            lambda,
        },
        s,
        d,
    );
    Ok((allocation, z - 1.0 - z.ln()))
}

/// `∫ g ln g f` with `g = a(p)/d`, the divergence of the allocation's price
/// distribution from the landscape.
pub fn kl_divergence(allocation: &Allocation, landscape: &Landscape) -> f64 {
    let q = allocation.fraction();
    match &allocation.form {
        AllocationForm::Flat { level } => {
            let g = level / q;
            if g > 0.0 {
                g * g.ln() * landscape.moment(0.0, f64::INFINITY, 0)
            } else {
                0.0
            }
        }
        AllocationForm::KlUnsaturated { scale, lambda } if *scale <= 1.0 => {
            let t0 = landscape.tilted_moment(0.0, f64::INFINITY, 0, *lambda, 0.0);
            let t1 = landscape.tilted_moment(0.0, f64::INFINITY, 1, *lambda, 0.0);
            scale / q * ((scale / q).ln() * t0 - lambda * t1)
        }
        AllocationForm::KlExponential { p0, lambda } => {
            kl_saturated_exponential(landscape, q, *p0, *lambda)
        }
        AllocationForm::KlUnsaturated { scale, lambda } => {
            kl_saturated_exponential(landscape, q, scale.ln() / lambda, *lambda)
        }
        _ => {
            let bps = allocation.breakpoints();
            landscape.integrate_with_breaks(
                |p| {
                    let g = allocation.value(p) / q;
                    if g > 0.0 {
                        g * g.ln()
                    } else {
                        0.0
                    }
                },
                0.0,
                f64::INFINITY,
                &bps,
            )
        }
    }
}

fn kl_saturated_exponential(landscape: &Landscape, q: f64, p0: f64, lambda: f64) -> f64 {
    let head = landscape.moment(0.0, p0, 0);
    let t0 = landscape.tilted_moment(p0, f64::INFINITY, 0, lambda, p0);
    let t1 = landscape.tilted_moment(p0, f64::INFINITY, 1, lambda, p0);
    (-q.ln() * (head + t0) + lambda * (p0 * t0 - t1)) / q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn exponential_example() {
        let l = Landscape::exponential(1.0).unwrap();
        let sol = solve_kl(&l, 0.5, 1.0, 0.8).unwrap();
        match sol.allocation.form {
            AllocationForm::KlUnsaturated { scale, lambda } => {
                assert!(rel(lambda, 0.25) < 1e-10, "{lambda}");
                assert!(rel(scale, 0.5 / 0.8) < 1e-10, "{scale}");
            }
            ref f => panic!("{f:?}"),
        }
        assert_eq!(sol.diagnostics.case, SolveCase::KlUnsaturated);
        let kl = kl_divergence(&sol.allocation, &l);
        assert!((kl - 0.023_143_551_314_209_7).abs() < 1e-10, "{kl}");
    }

    #[test]
    fn closed_form_examples() {
        let (_, kl) = kl_exponential_closed_form(1.0, 0.5, 1.0, 0.8).unwrap();
        assert!((kl - (0.8 - 1.0 - 0.8f64.ln())).abs() < 1e-15);
        let (_, kl) = kl_exponential_closed_form(1.0, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(kl, 0.0);
        let (_, kl) = kl_exponential_closed_form(1.0, 0.5, 1.0, 0.5).unwrap();
        assert!((kl - 0.193_147_180_559_945_3).abs() < 1e-15);
        assert!(kl_exponential_closed_form(1.0, 0.5, 1.0, 0.4).is_err());
        assert!(kl_exponential_closed_form(1.0, 0.5, 1.0, 1.1).is_err());
    }

    #[test]
    fn closed_form_divergence_matches_quadrature() {
        let l = Landscape::exponential(1.0).unwrap();
        let (a, kl) = kl_exponential_closed_form(1.0, 0.5, 1.0, 0.8).unwrap();
        let quad = l.integrate(
            |p| {
                let g = a.value(p) / 0.5;
                g * g.ln()
            },
            0.0,
            f64::INFINITY,
        );
        assert!((quad - kl).abs() < 1e-9);
    }

    #[test]
    fn uniform_saturated_example() {
        // Reference from an independent 2-D root find over (p0, λ).
        let l = Landscape::uniform(0.0, 1.0).unwrap();
        let sol = solve_kl(&l, 0.5, 1.0, 0.3).unwrap();
        match sol.allocation.form {
            AllocationForm::KlExponential { p0, lambda } => {
                assert!((p0 - 0.238_312_651_554_060_7).abs() < 1e-8, "{p0}");
                assert!((lambda - 3.569_291_881_352_379_7).abs() < 1e-7, "{lambda}");
            }
            ref f => panic!("{f:?}"),
        }
        assert_eq!(sol.diagnostics.case, SolveCase::KlSaturated);
    }

    #[test]
    fn uniform_example_matches_grid_oracle() {
        let l = Landscape::uniform(0.0, 1.0).unwrap();
        let sol = solve_kl(&l, 0.5, 1.0, 0.3).unwrap();
        let (p0, lambda) = match sol.allocation.form {
            AllocationForm::KlExponential { p0, lambda } => (p0, lambda),
            ref f => panic!("{f:?}"),
        };
        // Grid search over (p0, λ), refined three times around the best cell.
        let residual = |pp: f64, ll: f64| {
            let a = |p: f64| (ll * (pp - p)).exp().min(1.0);
            let dem = l.integrate_with_breaks(a, 0.0, 1.0, &[pp]) - 0.5;
            let sp = l.integrate_with_breaks(|p| p * a(p), 0.0, 1.0, &[pp]) - 0.15;
            dem * dem + sp * sp
        };
        let (mut cp, mut cl, mut dp, mut dl) = (0.25, 5.0, 0.005, 0.05);
        let mut half = 50;
        for _ in 0..4 {
            let mut best = (f64::INFINITY, cp, cl);
            for i in -half..=half {
                for j in -half..=half {
                    let pp = cp + i as f64 * dp;
                    let ll = cl + j as f64 * dl;
                    if pp < 0.0 || ll <= 0.0 {
                        continue;
                    }
                    let r = residual(pp, ll);
                    if r < best.0 {
                        best = (r, pp, ll);
                    }
                }
            }
            cp = best.1;
            cl = best.2;
            dp /= 10.0;
            dl /= 10.0;
            half = 20;
        }
        assert!((cp - p0).abs() <= 1e-4 && (cl - lambda).abs() <= 1e-3, "{cp} {cl}");
    }

    #[test]
    fn endpoints() {
        let l = Landscape::lognormal(0.0, 0.5).unwrap();
        let range = feasible_spend_range(&l, 0.4, 1.0).unwrap();
        let flat = solve_kl(&l, 0.4, 1.0, range.t_bar).unwrap();
        assert_eq!(flat.allocation.form, AllocationForm::Flat { level: 0.4 });
        assert_eq!(kl_divergence(&flat.allocation, &l), 0.0);
        assert!(solve_kl(&l, 0.4, 1.0, 0.5 * range.t_min).unwrap_err().is_infeasible());
        let step = solve_kl(&l, 0.4, 1.0, range.t_min).unwrap();
        assert_eq!(step.diagnostics.case, SolveCase::Step);
    }

    #[test]
    fn numeric_matches_closed_form_on_grid() {
        for &gamma in &[0.5, 1.0, 2.0] {
            for &q in &[0.2, 0.5, 0.8] {
                for i in 0..4 {
                    let t = (q + (1.0 - q) * (0.1 + 0.25 * i as f64)) / gamma;
                    let l = Landscape::exponential(gamma).unwrap();
                    let sol = solve_kl(&l, q, 1.0, t).unwrap();
                    let (closed, kl) = kl_exponential_closed_form(gamma, q, 1.0, t).unwrap();
                    let (AllocationForm::KlUnsaturated { scale: s1, lambda: l1 }, AllocationForm::KlUnsaturated { scale: s2, lambda: l2 }) =
                        (&sol.allocation.form, &closed.form)
                    else {
                        panic!("unexpected forms")
                    };
                    assert!(rel(*l1, *l2) < 1e-8 && rel(*s1, *s2) < 1e-8);
                    assert!(rel(kl_divergence(&sol.allocation, &l), kl) < 1e-8);
                }
            }
        }
    }

    #[test]
    fn solution_beats_feasible_perturbations() {
        let l = Landscape::uniform(0.0, 1.0).unwrap();
        let sol = solve_kl(&l, 0.5, 1.0, 0.3).unwrap();
        let n = 400;
        let ps: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let base: Vec<f64> = ps.iter().map(|&p| sol.allocation.value(p)).collect();
        let q: f64 = base.iter().sum::<f64>() / n as f64;
        let kl = |a: &[f64]| -> f64 {
            a.iter()
                .map(|&v| {
                    let g = v / q;
                    if g > 0.0 {
                        g * g.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / n as f64
        };
        let k0 = kl(&base);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tried = 0;
        while tried < 200 {
            let eps = 0.01;
            let mut delta: Vec<f64> = base
                .iter()
                .map(|&v| if v >= 1.0 { -eps * rng.random::<f64>() } else { eps * rng.random_range(-1.0..1.0) })
                .collect();
            // Restore Σδ = 0 and Σpδ = 0 using c1 + c2·p on the unsaturated bins.
            let free: Vec<usize> = (0..n).filter(|&i| base[i] < 1.0).collect();
            let (mut s0, mut s1, mut s2, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &i in &free {
                s0 += 1.0;
                s1 += ps[i];
                s2 += ps[i] * ps[i];
            }
            for i in 0..n {
                r0 += delta[i];
                r1 += ps[i] * delta[i];
            }
            let det = s0 * s2 - s1 * s1;
            let c1 = (-r0 * s2 + r1 * s1) / det;
            let c2 = (-r1 * s0 + r0 * s1) / det;
            for &i in &free {
                delta[i] += c1 + c2 * ps[i];
            }
            let trial: Vec<f64> = base.iter().zip(&delta).map(|(a, d)| a + d).collect();
            if trial.iter().any(|v| !(0.0..=1.0).contains(v)) {
                continue;
            }
            tried += 1;
            assert!(kl(&trial) >= k0 - 1e-8, "perturbation improved KL");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn landscape() -> impl Strategy<Value = Landscape> {
            prop_oneof![
                (-0.5f64..0.5, 0.2f64..1.2).prop_map(|(m, s)| Landscape::lognormal(m, s).unwrap()),
                (0.5f64..3.0).prop_map(|g| Landscape::exponential(g).unwrap()),
                (0.0f64..0.5, 0.5f64..2.0).prop_map(|(a, w)| Landscape::uniform(a, a + w).unwrap()),
            ]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn solutions_meet_constraints(l in landscape(), q in 0.05f64..0.95, u in 0.0f64..1.0) {
                let range = feasible_spend_range(&l, q, 1.0).unwrap();
                let t = range.t_min + u * (range.t_bar - range.t_min);
                let sol = solve_kl(&l, q, 1.0, t).unwrap();
                let a = &sol.allocation;
                prop_assert!((a.demand_fraction(&l) - q).abs() <= 1e-6 * q);
                if t < range.t_bar {
                    prop_assert!((a.spend_fraction(&l) - q * t).abs() <= 1e-6 * q * t);
                }
                let mut prev = f64::INFINITY;
                for i in 0..200 {
                    let v = a.value(i as f64 * 0.02);
                    prop_assert!((0.0..=1.0).contains(&v) && v <= prev);
                    prev = v;
                }
                prop_assert!(kl_divergence(a, &l) >= -1e-12);
            }
        }
    }
}

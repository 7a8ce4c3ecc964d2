//! Monte Carlo auction simulator.
//!
//! Each auction draws the highest external bid `p` from the landscape, then
//! one randomized bid per contract in contract order. The highest contract
//! bid wins if it strictly exceeds `p` and pays `p`. Contract ties are broken
//! uniformly at random.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bidding::{strategy_from_allocation, BidStrategy};
use crate::error::{Error, Result};
use crate::landscape::Landscape;
use crate::single_l2::{solve_l2, spend_range_for_fraction, step_solution};

/// Environment variable capping the simulator's worker threads.
pub const THREADS_ENV: &str = "REPALLOC_THREADS";

pub const DEFAULT_SIGMAS: [f64; 6] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0];
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];
pub const DEFAULT_SPEND_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];
pub const DEFAULT_SPEND_DEMAND: f64 = 0.8;
pub const DEFAULT_TRIALS: u32 = 15;
pub const DEFAULT_AUCTIONS: u64 = 10_000;

#[derive(Debug, Clone, Serialize)]
pub struct SimContract {
    pub label: String,
    pub strategy: BidStrategy,
    /// Target share of auctions won, `d/s`.
    pub demand_fraction: f64,
    /// Target average price per won impression.
    pub spend_per_impression: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub landscape: Landscape,
    pub contracts: Vec<SimContract>,
    pub n_auctions: u64,
    pub n_trials: u32,
    pub seed: u64,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n_auctions == 0 {
            return Err(Error::invalid("n_auctions", "must be at least 1"));
        }
        if self.n_trials == 0 {
            return Err(Error::invalid("n_trials", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: u32,
    pub contract: String,
    pub delivered: u64,
    pub target_delivered: f64,
    pub spend: f64,
    pub target_spend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractSummary {
    pub contract: String,
    pub mean_delivered_fraction: f64,
    pub target_fraction: f64,
    /// Delivery errors as a fraction of the auctions in a trial.
    pub mean_delivery_error: f64,
    pub max_delivery_error: f64,
    pub mean_spend: f64,
    pub target_spend: f64,
    /// Spend errors relative to the target spend; zero targets give zero error
    /// when nothing was spent and infinity otherwise.
    pub mean_relative_spend_error: f64,
    pub max_relative_spend_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub n_auctions: u64,
    pub n_trials: u32,
    pub seed: u64,
    pub rows: Vec<TrialRow>,
    /// Auctions won by the external market, per trial.
    pub external_wins: Vec<u64>,
    pub summary: Vec<ContractSummary>,
}

impl SimReport {
    pub fn rows_for<'a>(&'a self, contract: &'a str) -> impl Iterator<Item = &'a TrialRow> + 'a {
        self.rows.iter().filter(move |r| r.contract == contract)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,contract,delivered,target_delivered,spend,target_spend\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.trial,
                r.contract,
                r.delivered,
                fmt_f64(r.target_delivered),
                fmt_f64(r.spend),
                fmt_f64(r.target_spend)
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            n_auctions: u64,
            n_trials: u32,
            seed: u64,
            external_wins: &'a [u64],
            contracts: &'a [ContractSummary],
        }
        let s = Summary {
            n_auctions: self.n_auctions,
            n_trials: self.n_trials,
            seed: self.seed,
            external_wins: &self.external_wins,
            contracts: &self.summary,
        };
        serde_json::to_string_pretty(&s).expect("summary serializes")
    }
}

/// Seventeen significant digits, locale independent.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

struct TrialOutcome {
    delivered: Vec<u64>,
    spend: Vec<f64>,
    external: u64,
}

fn run_trial(config: &SimConfig, trial: u32) -> TrialOutcome {
    let m = config.contracts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ u64::from(trial));
    let mut delivered = vec![0u64; m];
    let mut spend = vec![0.0; m];
    let mut external = 0u64;
    let mut tied: Vec<usize> = Vec::with_capacity(m);
    for _ in 0..config.n_auctions {
        let price = config.landscape.sample_one(&mut rng);
        let mut best = f64::NEG_INFINITY;
        tied.clear();
        for (j, c) in config.contracts.iter().enumerate() {
            if let Some(bid) = c.strategy.sample_bid(&mut rng) {
                if bid > best {
                    best = bid;
                    tied.clear();
                    tied.push(j);
                } else if bid == best {
                    tied.push(j);
                }
            }
        }
        if tied.is_empty() || best <= price {
            external += 1;
            continue;
        }
        let winner = if tied.len() == 1 {
            tied[0]
        } else {
            tied[rng.random_range(0..tied.len())]
        };
        delivered[winner] += 1;
        spend[winner] += price;
    }
    TrialOutcome {
        delivered,
        spend,
        external,
    }
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn parallel<T: Send, F: Fn(u32) -> T + Sync + Send>(n: u32, f: F) -> Vec<T> {
    let run = || (0..n).into_par_iter().map(&f).collect::<Vec<T>>();
    match thread_cap().and_then(|k| rayon::ThreadPoolBuilder::new().num_threads(k).build().ok()) {
        Some(pool) => pool.install(run),
        None => run(),
    }
}

/// Simulates every trial of `config`. Results depend only on the config.
pub fn run_auctions(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let outcomes = parallel(config.n_trials, |trial| run_trial(config, trial));
    let n = config.n_auctions as f64;
    let mut rows = Vec::with_capacity(outcomes.len() * config.contracts.len());
    for (trial, out) in outcomes.iter().enumerate() {
        for (j, c) in config.contracts.iter().enumerate() {
            rows.push(TrialRow {
                trial: trial as u32,
                contract: c.label.clone(),
                delivered: out.delivered[j],
                target_delivered: c.demand_fraction * n,
                spend: out.spend[j],
                target_spend: c.demand_fraction * c.spend_per_impression * n,
            });
        }
    }
    let summary = config
        .contracts
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let k = outcomes.len() as f64;
            let target_spend = c.demand_fraction * c.spend_per_impression * n;
            let mut s = ContractSummary {
                contract: c.label.clone(),
                mean_delivered_fraction: 0.0,
                target_fraction: c.demand_fraction,
                mean_delivery_error: 0.0,
                max_delivery_error: 0.0,
                mean_spend: 0.0,
                target_spend,
                mean_relative_spend_error: 0.0,
                max_relative_spend_error: 0.0,
            };
            for out in &outcomes {
                let frac = out.delivered[j] as f64 / n;
                let err = (frac - c.demand_fraction).abs();
                let spend_err = relative_error(out.spend[j], target_spend);
                s.mean_delivered_fraction += frac / k;
                s.mean_delivery_error += err / k;
                s.max_delivery_error = s.max_delivery_error.max(err);
                s.mean_spend += out.spend[j] / k;
                s.mean_relative_spend_error += spend_err / k;
                s.max_relative_spend_error = s.max_relative_spend_error.max(spend_err);
            }
            s
        })
        .collect();
    Ok(SimReport {
        n_auctions: config.n_auctions,
        n_trials: config.n_trials,
        seed: config.seed,
        rows,
        external_wins: outcomes.iter().map(|o| o.external).collect(),
        summary,
    })
}

fn relative_error(value: f64, target: f64) -> f64 {
    if target != 0.0 {
        ((value - target) / target).abs()
    } else if value == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentTrial {
    pub trial: u32,
    pub delivered: u64,
    pub spend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationCell {
    pub sigma: f64,
    pub demand_fraction: f64,
    /// Bid placed on every auction: the minimal-spend cutoff price.
    pub p_max: f64,
    pub trials: Vec<ExperimentTrial>,
    pub mean_delivered_fraction: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpendCell {
    pub sigma: f64,
    pub spend_fraction: f64,
    pub mean_price: f64,
    pub target_spend_per_impression: f64,
    pub skipped: bool,
    pub trials: Vec<ExperimentTrial>,
    /// Mean realized spend per auction.
    pub mean_spend: f64,
    /// `|mean spend − target| / (μ·d)`, all per auction.
    pub scaled_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub sigmas: Vec<f64>,
    pub trials: u32,
    pub auctions: u64,
    pub seed: u64,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            sigmas: DEFAULT_SIGMAS.to_vec(),
            trials: DEFAULT_TRIALS,
            auctions: DEFAULT_AUCTIONS,
            seed: 0,
        }
    }
}

fn cell_seed(seed: u64, cell: usize) -> u64 {
    seed.wrapping_add((cell as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn simulate_single(
    landscape: &Landscape,
    strategy: BidStrategy,
    q: f64,
    t: f64,
    settings: &ExperimentSettings,
    seed: u64,
) -> Result<Vec<ExperimentTrial>> {
    let config = SimConfig {
        landscape: landscape.clone(),
        contracts: vec![SimContract {
            label: "c0".into(),
            strategy,
            demand_fraction: q,
            spend_per_impression: t,
        }],
        n_auctions: settings.auctions,
        n_trials: settings.trials,
        seed,
    };
    let report = run_auctions(&config)?;
    Ok(report
        .rows
        .iter()
        .map(|r| ExperimentTrial {
            trial: r.trial,
            delivered: r.delivered,
            spend: r.spend,
        })
        .collect())
}

/// Delivery accuracy of the cheapest allocation for each `(σ, d/s)` cell.
pub fn replicate_allocation_experiment(
    settings: &ExperimentSettings,
    fractions: &[f64],
) -> Result<Vec<AllocationCell>> {
    let mut cells = Vec::new();
    for (i, &sigma) in settings.sigmas.iter().enumerate() {
        let landscape = Landscape::lognormal(0.0, sigma)?;
        for (k, &q) in fractions.iter().enumerate() {
            let t_min = spend_range_for_fraction(&landscape, q).t_min;
            let sol = step_solution(&landscape, q, t_min);
            let p_max = landscape.quantile(q)?;
            let strategy = strategy_from_allocation(&sol.allocation)?;
            let seed = cell_seed(settings.seed, i * fractions.len() + k);
            let trials = simulate_single(&landscape, strategy, q, t_min, settings, seed)?;
            let n = settings.auctions as f64;
            let mean = trials.iter().map(|t| t.delivered as f64 / n).sum::<f64>() / trials.len() as f64;
            cells.push(AllocationCell {
                sigma,
                demand_fraction: q,
                p_max,
                trials,
                mean_delivered_fraction: mean,
                deviation: mean - q,
            });
        }
    }
    Ok(cells)
}

/// Spend accuracy of L2 allocations with `t = frac·E[p]` at fixed `d/s`.
/// Cells with `t` outside the feasible spend range are marked skipped.
pub fn replicate_spend_experiment(
    settings: &ExperimentSettings,
    demand_fraction: f64,
    spend_fractions: &[f64],
) -> Result<Vec<SpendCell>> {
    let q = demand_fraction;
    let mut cells = Vec::new();
    for (i, &sigma) in settings.sigmas.iter().enumerate() {
        let landscape = Landscape::lognormal(0.0, sigma)?;
        let mu = landscape.mean();
        let range = spend_range_for_fraction(&landscape, q);
        for (k, &frac) in spend_fractions.iter().enumerate() {
            let t = frac * mu;
            let mut cell = SpendCell {
                sigma,
                spend_fraction: frac,
                mean_price: mu,
                target_spend_per_impression: t,
                skipped: true,
                trials: Vec::new(),
                mean_spend: f64::NAN,
                scaled_error: f64::NAN,
            };
            if t < range.t_min {
                cells.push(cell);
                continue;
            }
            let sol = solve_l2(&landscape, q, 1.0, t)?;
            let strategy = strategy_from_allocation(&sol.allocation)?;
            let seed = cell_seed(settings.seed ^ 0x5EED_5EED, i * spend_fractions.len() + k);
            let trials = simulate_single(&landscape, strategy, q, t, settings, seed)?;
            let n = settings.auctions as f64;
            let mean = trials.iter().map(|tr| tr.spend / n).sum::<f64>() / trials.len() as f64;
            cell.skipped = false;
            cell.trials = trials;
            cell.mean_spend = mean;
            cell.scaled_error = (mean - q * t).abs() / (mu * q);
            cells.push(cell);
        }
    }
    Ok(cells)
}

pub fn allocation_experiment_csv(cells: &[AllocationCell], auctions: u64) -> String {
    let mut out = String::from("sigma,demand_fraction,trial,delivered,target_delivered,delivered_fraction\n");
    let n = auctions as f64;
    for c in cells {
        for t in &c.trials {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt_f64(c.sigma),
                fmt_f64(c.demand_fraction),
                t.trial,
                t.delivered,
                fmt_f64(c.demand_fraction * n),
                fmt_f64(t.delivered as f64 / n)
            );
        }
    }
    out
}

pub fn spend_experiment_csv(cells: &[SpendCell], demand_fraction: f64, trials: u32, auctions: u64) -> String {
    let mut out =
        String::from("sigma,spend_fraction,trial,status,delivered,target_delivered,spend,target_spend\n");
    let n = auctions as f64;
    for c in cells {
        let target_delivered = fmt_f64(demand_fraction * n);
        let target_spend = fmt_f64(demand_fraction * c.target_spend_per_impression * n);
        if c.skipped {
            for trial in 0..trials {
                let _ = writeln!(
                    out,
                    "{},{},{trial},skipped,,{target_delivered},,{target_spend}",
                    fmt_f64(c.sigma),
                    fmt_f64(c.spend_fraction)
                );
            }
            continue;
        }
        for t in &c.trials {
            let _ = writeln!(
                out,
                "{},{},{},ok,{},{target_delivered},{},{target_spend}",
                fmt_f64(c.sigma),
                fmt_f64(c.spend_fraction),
                t.trial,
                t.delivered,
                fmt_f64(t.spend)
            );
        }
    }
    out
}

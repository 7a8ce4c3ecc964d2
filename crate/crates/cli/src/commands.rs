use std::fmt::Write as _;
use std::path::Path;

use repalloc::sim::{
    allocation_experiment_csv, fmt_f64, spend_experiment_csv, DEFAULT_AUCTIONS, DEFAULT_FRACTIONS,
    DEFAULT_SIGMAS, DEFAULT_SPEND_DEMAND, DEFAULT_SPEND_FRACTIONS, DEFAULT_TRIALS,
};
use repalloc::{
    decentralize, feasible_spend_range, kl_divergence, replicate_allocation_experiment, replicate_spend_experiment,
    run_auctions, scale_spends, solve_kl, solve_l2, strategy_from_allocation, Allocation, Contract, ContractSet,
    ExperimentSettings, Landscape, LandscapeKind, SimConfig, SimContract, Solution,
};
use serde_json::{json, Value};

use crate::config::{read_samples, Objective, RunConfig};
use crate::{Cli, CliError};

const GRID_POINTS: usize = 1000;
const QUANTILE_POINTS: usize = 101;

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    write_file(dir, name, &text)
}

/// Upper end of the reporting grid: the support bound, or a far quantile.
fn horizon(landscape: &Landscape, allocations: &[Allocation]) -> f64 {
    let hi = landscape.support_hi();
    if hi.is_finite() {
        return hi;
    }
    let far = landscape.quantile(0.999).unwrap_or(1.0);
    allocations
        .iter()
        .flat_map(|a| a.breakpoints())
        .filter(|p| p.is_finite())
        .fold(far, f64::max)
}

fn price_grid(top: f64) -> Vec<f64> {
    (0..GRID_POINTS).map(|i| top * i as f64 / (GRID_POINTS - 1) as f64).collect()
}

fn landscape_json(landscape: &Landscape) -> Value {
    match landscape.kind() {
        LandscapeKind::Empirical { samples } => json!({ "kind": "empirical", "n": samples.len() }),
        _ => serde_json::to_value(landscape).expect("landscape serializes"),
    }
}

fn objective(cli: &Cli, cfg: &RunConfig) -> Objective {
    cli.objective.or(cfg.objective).unwrap_or_default()
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::L2 => "l2",
        Objective::Kl => "kl",
    }
}

fn solve_one(o: Objective, l: &Landscape, d: f64, s: f64, t: f64) -> Result<Solution, CliError> {
    Ok(match o {
        Objective::L2 => solve_l2(l, d, s, t)?,
        Objective::Kl => solve_kl(l, d, s, t)?,
    })
}

pub fn solve_single(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let landscape = cfg.build_landscape()?;
    let supply = cfg.supply()?;
    let demand = RunConfig::require(cfg.demand, "demand")?;
    let target = RunConfig::require(cfg.target_spend, "target_spend")?;
    let objective = objective(cli, cfg);
    let range = feasible_spend_range(&landscape, demand, supply)?;
    let sol = solve_one(objective, &landscape, demand, supply, target)?;
    let strategy = strategy_from_allocation(&sol.allocation)?;

    let mut csv = String::from("p,a_over_s\n");
    for p in price_grid(horizon(&landscape, std::slice::from_ref(&sol.allocation))) {
        let _ = writeln!(csv, "{},{}", fmt_f64(p), fmt_f64(sol.allocation.value(p)));
    }
    write_file(&cli.out, "allocation.csv", &csv)?;
    write_json(
        &cli.out,
        "strategy.json",
        &json!({
            "objective": objective_name(objective),
            "allocation": sol.allocation,
            "strategy": strategy,
        }),
    )?;
    write_json(
        &cli.out,
        "diagnostics.json",
        &json!({
            "objective": objective_name(objective),
            "landscape": landscape_json(&landscape),
            "supply": supply,
            "demand": demand,
            "target_spend": target,
            "feasible_range": range,
            "solver": sol.diagnostics,
            "realized_demand_fraction": sol.allocation.demand_fraction(&landscape),
            "realized_spend_per_impression": sol.allocation.spend_per_impression(&landscape),
            "kl_divergence": kl_divergence(&sol.allocation, &landscape),
        }),
    )
}

fn contract_set(cfg: &RunConfig) -> Result<ContractSet, CliError> {
    let supply = cfg.supply()?;
    let (demands, spends) = cfg.contract_lists()?;
    RunConfig::check_positive_list(&demands, "demands")?;
    Ok(ContractSet {
        supply,
        contracts: demands
            .iter()
            .zip(&spends)
            .map(|(&demand, &target_spend)| Contract { demand, target_spend })
            .collect(),
    })
}

pub fn solve_multi(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let landscape = cfg.build_landscape()?;
    let set = contract_set(cfg)?;
    let sol = repalloc::solve_multi(&landscape, &set)?;
    let top = horizon(&landscape, &sol.allocations);

    let mut csv = String::from("p");
    for j in 0..sol.allocations.len() {
        let _ = write!(csv, ",a_over_s_{j}");
    }
    csv.push_str(",total\n");
    for p in price_grid(top) {
        csv.push_str(&fmt_f64(p));
        for a in &sol.allocations {
            let _ = write!(csv, ",{}", fmt_f64(a.value(p)));
        }
        let _ = writeln!(csv, ",{}", fmt_f64(sol.total(p)));
    }
    write_file(&cli.out, "allocation.csv", &csv)?;

    let strategies = if sol.decentralizable {
        decentralize(&sol.allocations, top)?
    } else {
        Vec::new()
    };
    write_json(
        &cli.out,
        "strategy.json",
        &json!({
            "decentralizable": sol.decentralizable,
            "allocations": sol.allocations,
            "strategies": strategies,
        }),
    )?;
    let spend_scale = if sol.decentralizable {
        Value::from(1.0)
    } else {
        scale_spends(&landscape, &set).map_or(Value::Null, |(k, _)| Value::from(k))
    };
    write_json(
        &cli.out,
        "diagnostics.json",
        &json!({
            "landscape": landscape_json(&landscape),
            "contracts": set,
            "case": sol.case,
            "decentralizable": sol.decentralizable,
            "diagnosis": sol.diagnosis,
            "p_star": sol.p_star,
            "common_slope": sol.common_slope,
            "levels": sol.levels,
            "p_max": sol.p_max,
            "lambda1": sol.lambda1,
            "lambda2": sol.lambda2,
            "iterations": sol.iterations,
            "spend_scale": spend_scale,
        }),
    )
}

pub fn simulate(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let landscape = cfg.build_landscape()?;
    let trials = cli.trials.or(cfg.trials).unwrap_or(DEFAULT_TRIALS);
    let auctions = cli.auctions.or(cfg.auctions).unwrap_or(DEFAULT_AUCTIONS);
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let contracts: Vec<SimContract> = if cfg.demands.is_some() {
        let set = contract_set(cfg)?;
        let sol = repalloc::solve_multi(&landscape, &set)?;
        if !sol.decentralizable {
            let hint = scale_spends(&landscape, &set)
                .map(|(k, _)| format!("; scaling all target spends by {k} makes it decentralizable"))
                .unwrap_or_default();
            return Err(CliError::NotDecentralizable(format!(
                "contract set cannot be implemented by independent bidding ({}){hint}",
                sol.diagnosis
            )));
        }
        let top = horizon(&landscape, &sol.allocations);
        decentralize(&sol.allocations, top)?
            .into_iter()
            .zip(&set.contracts)
            .enumerate()
            .map(|(j, (strategy, c))| SimContract {
                label: format!("c{j}"),
                strategy,
                demand_fraction: c.demand / set.supply,
                spend_per_impression: c.target_spend,
            })
            .collect()
    } else {
        let supply = cfg.supply()?;
        let demand = RunConfig::require(cfg.demand, "demand")?;
        let target = RunConfig::require(cfg.target_spend, "target_spend")?;
        let sol = solve_one(objective(cli, cfg), &landscape, demand, supply, target)?;
        vec![SimContract {
            label: "c0".into(),
            strategy: strategy_from_allocation(&sol.allocation)?,
            demand_fraction: demand / supply,
            spend_per_impression: target,
        }]
    };
    let strategies: Vec<_> = contracts.iter().map(|c| &c.strategy).collect();
    write_json(&cli.out, "strategy.json", &json!({ "strategies": strategies }))?;
    let report = run_auctions(&SimConfig {
        landscape,
        contracts,
        n_auctions: auctions,
        n_trials: trials,
        seed,
    })?;
    write_file(&cli.out, "sim_report.csv", &report.to_csv())?;
    let mut summary = report.summary_json();
    summary.push('\n');
    write_file(&cli.out, "sim_summary.json", &summary)
}

pub fn replicate(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let settings = ExperimentSettings {
        sigmas: cfg.sigmas.clone().unwrap_or_else(|| DEFAULT_SIGMAS.to_vec()),
        trials: cli.trials.or(cfg.trials).unwrap_or(DEFAULT_TRIALS),
        auctions: cli.auctions.or(cfg.auctions).unwrap_or(DEFAULT_AUCTIONS),
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
    };
    RunConfig::check_positive_list(&settings.sigmas, "sigmas")?;
    if settings.trials == 0 {
        return Err(CliError::Config("key `trials`: must be at least 1".into()));
    }
    if settings.auctions == 0 {
        return Err(CliError::Config("key `auctions`: must be at least 1".into()));
    }
    let fractions = cfg.demand_fractions.clone().unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
    if !fractions.iter().all(|q| *q > 0.0 && *q < 1.0) {
        return Err(CliError::Config("key `demand_fractions`: entries must lie in (0, 1)".into()));
    }
    let spend_demand = cfg.spend_demand.unwrap_or(DEFAULT_SPEND_DEMAND);
    if !(spend_demand > 0.0 && spend_demand < 1.0) {
        return Err(CliError::Config("key `spend_demand`: must lie in (0, 1)".into()));
    }
    let spend_fractions = cfg.spend_fractions.clone().unwrap_or_else(|| DEFAULT_SPEND_FRACTIONS.to_vec());
    RunConfig::check_positive_list(&spend_fractions, "spend_fractions")?;

    let alloc = replicate_allocation_experiment(&settings, &fractions)?;
    let spend = replicate_spend_experiment(&settings, spend_demand, &spend_fractions)?;
    write_file(&cli.out, "allocation_experiment.csv", &allocation_experiment_csv(&alloc, settings.auctions))?;
    write_file(
        &cli.out,
        "spend_experiment.csv",
        &spend_experiment_csv(&spend, spend_demand, settings.trials, settings.auctions),
    )?;
    let alloc_cells: Vec<Value> = alloc
        .iter()
        .map(|c| {
            json!({
                "sigma": c.sigma,
                "demand_fraction": c.demand_fraction,
                "p_max": c.p_max,
                "mean_delivered_fraction": c.mean_delivered_fraction,
                "deviation": c.deviation,
            })
        })
        .collect();
    let spend_cells: Vec<Value> = spend
        .iter()
        .map(|c| {
            json!({
                "sigma": c.sigma,
                "spend_fraction": c.spend_fraction,
                "mean_price": c.mean_price,
                "target_spend_per_impression": c.target_spend_per_impression,
                "skipped": c.skipped,
                "mean_spend_per_auction": if c.skipped { Value::Null } else { Value::from(c.mean_spend) },
                "scaled_error": if c.skipped { Value::Null } else { Value::from(c.scaled_error) },
            })
        })
        .collect();
    write_json(
        &cli.out,
        "replicate_summary.json",
        &json!({
            "seed": settings.seed,
            "trials": settings.trials,
            "auctions": settings.auctions,
            "spend_demand_fraction": spend_demand,
            "allocation_experiment": alloc_cells,
            "spend_experiment": spend_cells,
        }),
    )
}

pub fn fit_landscape(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let path = match (&cli.samples, &cfg.samples) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => cfg.resolve(p),
        (None, None) => return Err(CliError::Config("missing key `samples` (or --samples)".into())),
    };
    let samples = read_samples(&path)?;
    let landscape = Landscape::fit_empirical(&samples).map_err(|e| CliError::Config(format!("samples: {e}")))?;
    if landscape.is_degenerate() {
        return Err(CliError::Config("samples: all prices are equal".into()));
    }
    if samples.iter().any(|x| *x <= 0.0) {
        return Err(CliError::Config("samples: lognormal fit needs strictly positive prices".into()));
    }
    let n = samples.len() as f64;
    let logs: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
    let mu = logs.iter().sum::<f64>() / n;
    let sigma = (logs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let quantiles: Vec<[f64; 2]> = (0..QUANTILE_POINTS)
        .map(|i| {
            let q = i as f64 / (QUANTILE_POINTS - 1) as f64;
            [q, landscape.quantile(q).expect("q lies in [0, 1]")]
        })
        .collect();
    write_json(
        &cli.out,
        "landscape.json",
        &json!({
            "n": samples.len(),
            "mean": landscape.mean(),
            "quantiles": quantiles,
            "lognormal_fit": { "mu": mu, "sigma": sigma },
        }),
    )
}

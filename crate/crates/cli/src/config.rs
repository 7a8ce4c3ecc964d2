use std::path::{Path, PathBuf};

use clap::ValueEnum;
use repalloc::Landscape;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    L2,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandscapeName {
    Lognormal,
    Exponential,
    Uniform,
    Empirical,
}

/// Flat key-value run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub objective: Option<Objective>,
    pub seed: Option<u64>,

    pub landscape: Option<LandscapeName>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub gamma: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Sample file for empirical landscapes, relative to the config file.
    pub samples: Option<PathBuf>,

    pub supply: Option<f64>,
    pub demand: Option<f64>,
    pub target_spend: Option<f64>,
    pub demands: Option<Vec<f64>>,
    pub target_spends: Option<Vec<f64>>,

    pub trials: Option<u32>,
    pub auctions: Option<u64>,

    pub sigmas: Option<Vec<f64>>,
    pub demand_fractions: Option<Vec<f64>>,
    pub spend_demand: Option<f64>,
    pub spend_fractions: Option<Vec<f64>>,

    #[serde(skip)]
    base_dir: PathBuf,
}

fn missing(key: &str) -> CliError {
    CliError::Config(format!("missing key `{key}`"))
}

fn bad(key: &str, reason: &str) -> CliError {
    CliError::Config(format!("key `{key}`: {reason}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = RunConfig::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| {
            let key = e.span().and_then(|span| key_at(text, span.start));
            match key {
                Some(k) => CliError::Config(format!("key `{k}`: {}", e.message())),
                None => CliError::Config(e.message().to_string()),
            }
        })
    }

    pub fn require<T: Copy>(value: Option<T>, key: &str) -> Result<T, CliError> {
        value.ok_or_else(|| missing(key))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn build_landscape(&self) -> Result<Landscape, CliError> {
        let name = Self::require(self.landscape, "landscape")?;
        let built = match name {
            LandscapeName::Lognormal => Landscape::lognormal(
                Self::require(self.mu, "mu")?,
                Self::require(self.sigma, "sigma")?,
            ),
            LandscapeName::Exponential => Landscape::exponential(Self::require(self.gamma, "gamma")?),
            LandscapeName::Uniform => {
                Landscape::uniform(Self::require(self.lo, "lo")?, Self::require(self.hi, "hi")?)
            }
            LandscapeName::Empirical => {
                let path = self.samples.as_deref().ok_or_else(|| missing("samples"))?;
                let samples = read_samples(&self.resolve(path))?;
                Landscape::fit_empirical(&samples)
            }
        };
        built.map_err(|e| CliError::Config(format!("landscape: {e}")))
    }

    pub fn supply(&self) -> Result<f64, CliError> {
        let s = Self::require(self.supply, "supply")?;
        if !(s > 0.0 && s.is_finite()) {
            return Err(bad("supply", "must be positive and finite"));
        }
        Ok(s)
    }

    pub fn contract_lists(&self) -> Result<(Vec<f64>, Vec<f64>), CliError> {
        let d = self.demands.clone().ok_or_else(|| missing("demands"))?;
        let t = self.target_spends.clone().ok_or_else(|| missing("target_spends"))?;
        if d.len() != t.len() {
            return Err(bad("target_spends", "must have one entry per demand"));
        }
        if d.is_empty() {
            return Err(bad("demands", "must list at least one contract"));
        }
        Ok((d, t))
    }

    pub fn check_positive_list(values: &[f64], key: &str) -> Result<(), CliError> {
        if values.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(bad(key, "entries must be positive and finite"))
        }
    }
}

/// Key assigned on the line containing byte offset `at`.
fn key_at(text: &str, at: usize) -> Option<String> {
    let start = text[..at.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let (key, _) = line.split_once('=')?;
    let key = key.trim().trim_matches('"');
    (!key.is_empty() && !key.starts_with('#')).then(|| key.to_string())
}

pub fn read_samples(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    repalloc::parse_samples(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

use std::path::{Path, PathBuf};

use metric_regions::{AlgorithmConfig, ScenarioSpec};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const CONFIG_HELP: &str = r#"CONFIG FILE (TOML)

Top level:
  seed = 7                     RNG seed (overridden by --seed; default 0)
  threads = 4                  worker threads (overridden by --threads)

[scenario]                     simulation model, selected by `type`:
  type = "setting1" | "setting2" | "setting3" | "setting4"
  type = "gaussian_multi"      with p = <response dim>, d = <predictor dim>,
                               heteroscedastic = true|false
  type = "wasserstein_example" with n_obs_per_curve, sigma_eps, g = [g0, g1, ..]

[algorithm]                    region algorithm, selected by `type`:
  type = "homoscedastic"       mean = { type = "knn", k = { auto = [1, 5, 10] } }
  type = "hetero-knn"          k = 50, mean = ... (as above)
  type = "hetero-tuned"        mean_k_grid = [..], radius_k_grid = [..],
                               held_out_tune = false
  type = "conformal-hetero"    k = 50, mean = ...
  mean options: { type = "knn", k = { fixed = 10 } | { auto = [..] } },
                { type = "global" }
  fit_metric / region_metric = "euclidean-l2" | "euclidean-sup" |
                               "wasserstein2" | "quantile-sup"
  randomized_ties = true|false (default: on for quantile-sup)
  fractions = [0.5, 0.5]       split fractions (three for three-split
                               algorithms); must sum to at most 1

[simulate]   n, out
[fit]        data (CSV), alpha, out (model JSON)
[predict]    model, queries (CSV with x_1..x_d), alphas = [0.2, 0.05], out
[evaluate]   either model + data, or (with [scenario] and [algorithm])
             n, n_eval, alpha; plus out, curve (TSV), mc_draws, grid_points
[replicate]  n, n_eval, alpha, replicates, out, curve (TSV), mc_draws,
             grid_points

Relative paths are resolved against the config file's directory; --out
replaces the command's `out`."#;

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub scenario: Option<ScenarioSpec>,
    pub algorithm: Option<AlgorithmConfig>,
    pub simulate: Option<SimulateSection>,
    pub fit: Option<FitSection>,
    pub predict: Option<PredictSection>,
    pub evaluate: Option<EvaluateSection>,
    pub replicate: Option<ReplicateSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub data: PathBuf,
    pub alpha: f64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    pub model: PathBuf,
    pub queries: PathBuf,
    #[serde(default)]
    pub alphas: Vec<f64>,
    pub out: Option<PathBuf>,
}

fn grid_points() -> usize {
    metric_regions::evaluation::DEFAULT_GRID_POINTS
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub n: Option<usize>,
    pub n_eval: Option<usize>,
    pub alpha: Option<f64>,
    pub out: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    #[serde(default)]
    pub mc_draws: usize,
    #[serde(default = "grid_points")]
    pub grid_points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateSection {
    pub n: usize,
    pub n_eval: usize,
    pub alpha: f64,
    pub replicates: usize,
    pub out: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    #[serde(default)]
    pub mc_draws: usize,
    #[serde(default = "grid_points")]
    pub grid_points: usize,
}

/// A parsed config plus the directory its relative paths refer to.
pub struct Loaded {
    pub config: RunConfig,
    base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self {
            config,
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Output path: `--out` wins over the section's `out`.
    pub fn output(&self, flag: Option<&Path>, section: Option<&Path>, what: &str) -> CliResult<PathBuf> {
        match (flag, section) {
            (Some(p), _) => Ok(p.to_path_buf()),
            (None, Some(p)) if !p.as_os_str().is_empty() => Ok(self.resolve(p)),
            _ => Err(CliError::Config(format!("no output path for {what}: set `out` or pass --out"))),
        }
    }

    pub fn scenario(&self) -> CliResult<&ScenarioSpec> {
        let s = self
            .config
            .scenario
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [scenario] section".into()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn algorithm(&self) -> CliResult<&AlgorithmConfig> {
        self.config
            .algorithm
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [algorithm] section".into()))
    }
}

pub fn section<'a, T>(s: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    s.as_ref().ok_or_else(|| CliError::Config(format!("missing [{name}] section")))
}

pub fn check_alpha(alpha: f64) -> CliResult<f64> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(CliError::Config(format!("alpha {alpha} must lie in (0, 1)")))
    }
}

pub fn check_fractions(algorithm: &AlgorithmConfig) -> CliResult<()> {
    if let Some(f) = &algorithm.fractions {
        let total: f64 = f.iter().sum();
        if total > 1.0 + 1e-12 || f.iter().any(|v| !(*v > 0.0)) {
            return Err(CliError::Config(format!(
                "fractions {f:?} must be positive and sum to at most 1"
            )));
        }
    }
    Ok(())
}

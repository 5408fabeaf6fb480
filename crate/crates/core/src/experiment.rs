//! Algorithm configuration, one-call fitting, and replicated simulation
//! studies.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, CoverageCurve, CoverageReport, EvalOptions};
use crate::exec::Execution;
use crate::frechet::{default_mean_k_grid, MeanSpec};
use crate::metric::MetricKind;
use crate::regions::{
    ConformalizedHeteroModel, HeteroscedasticRegionModel, HomoscedasticRegionModel, PredictionRegion,
    RegionOptions, RegionPredictor, TunedKnnModel,
};
use crate::rng::{hash_words, purpose};
use crate::simulation::{generate, ScenarioSpec};

/// Candidate radius neighbourhood sizes for the tuned algorithm.
pub fn default_radius_k_grid() -> Vec<usize> {
    vec![10, 15, 20, 30, 40, 50, 75, 100, 150, 200, 300, 400]
}

fn knn_auto() -> MeanSpec {
    MeanSpec::knn_auto()
}

fn mean_grid() -> Vec<usize> {
    default_mean_k_grid()
}

fn radius_grid() -> Vec<usize> {
    default_radius_k_grid()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum AlgorithmSpec {
    Homoscedastic {
        #[serde(default = "knn_auto")]
        mean: MeanSpec,
    },
    HeteroKnn {
        #[serde(default = "knn_auto")]
        mean: MeanSpec,
        k: usize,
    },
    HeteroTuned {
        #[serde(default = "mean_grid")]
        mean_k_grid: Vec<usize>,
        #[serde(default = "radius_grid")]
        radius_k_grid: Vec<usize>,
        /// Tune on a third split instead of leave-one-out on the calibration
        /// split.
        #[serde(default)]
        held_out_tune: bool,
    },
    ConformalHetero {
        #[serde(default = "knn_auto")]
        mean: MeanSpec,
        k: usize,
    },
}

impl AlgorithmSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Homoscedastic { .. } => "homoscedastic",
            Self::HeteroKnn { .. } => "hetero-knn",
            Self::HeteroTuned { .. } => "hetero-tuned",
            Self::ConformalHetero { .. } => "conformal-hetero",
        }
    }

    pub fn tuned() -> Self {
        Self::HeteroTuned {
            mean_k_grid: default_mean_k_grid(),
            radius_k_grid: default_radius_k_grid(),
            held_out_tune: false,
        }
    }

    /// Number of splits the algorithm consumes.
    pub fn splits(&self) -> usize {
        match self {
            Self::HeteroTuned {
                held_out_tune: true, ..
            }
            | Self::ConformalHetero { .. } => 3,
            _ => 2,
        }
    }

    pub fn default_fractions(&self) -> Vec<f64> {
        match self.splits() {
            3 => vec![0.4, 0.3, 0.3],
            _ => vec![0.5, 0.5],
        }
    }
}

/// An algorithm together with its metric choices and split fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    #[serde(flatten)]
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub fit_metric: Option<MetricKind>,
    #[serde(default)]
    pub region_metric: Option<MetricKind>,
    #[serde(default)]
    pub randomized_ties: Option<bool>,
    /// Defaults to `[0.5, 0.5]`, or `[0.4, 0.3, 0.3]` for three-split
    /// algorithms.
    #[serde(default)]
    pub fractions: Option<Vec<f64>>,
}

impl AlgorithmConfig {
    pub fn new(algorithm: AlgorithmSpec) -> Self {
        Self {
            algorithm,
            fit_metric: None,
            region_metric: None,
            randomized_ties: None,
            fractions: None,
        }
    }

    pub fn with_region_metric(mut self, metric: MetricKind) -> Self {
        self.region_metric = Some(metric);
        self
    }

    pub fn options(&self, seed: u64) -> RegionOptions {
        RegionOptions {
            fit_metric: self.fit_metric,
            region_metric: self.region_metric,
            randomized_ties: self.randomized_ties,
            seed,
        }
    }

    fn fractions(&self) -> Result<Vec<f64>> {
        let f = self
            .fractions
            .clone()
            .unwrap_or_else(|| self.algorithm.default_fractions());
        let need = self.algorithm.splits();
        if f.len() != need {
            return Err(Error::InvalidParameter(format!(
                "{} needs {need} split fractions, got {}",
                self.algorithm.name(),
                f.len()
            )));
        }
        Ok(f)
    }
}

/// Any fitted region model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FittedModel {
    Homoscedastic(HomoscedasticRegionModel),
    HeteroKnn(HeteroscedasticRegionModel),
    HeteroTuned(TunedKnnModel),
    ConformalHetero(ConformalizedHeteroModel),
}

impl FittedModel {
    fn inner(&self) -> &dyn RegionPredictor {
        match self {
            Self::Homoscedastic(m) => m,
            Self::HeteroKnn(m) => m,
            Self::HeteroTuned(m) => m,
            Self::ConformalHetero(m) => m,
        }
    }

    pub fn algorithm_name(&self) -> &'static str {
        match self {
            Self::Homoscedastic(_) => "homoscedastic",
            Self::HeteroKnn(_) => "hetero-knn",
            Self::HeteroTuned(_) => "hetero-tuned",
            Self::ConformalHetero(_) => "conformal-hetero",
        }
    }
}

impl RegionPredictor for FittedModel {
    fn alpha(&self) -> f64 {
        self.inner().alpha()
    }
    fn predictor_dim(&self) -> usize {
        self.inner().predictor_dim()
    }
    fn predict(&self, x: &[f64]) -> Result<PredictionRegion> {
        self.inner().predict(x)
    }
    fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        self.inner().predict_at(x, alpha)
    }
}

/// Splits `data` with `seed` and fits the configured algorithm.
pub fn fit_algorithm(
    config: &AlgorithmConfig,
    data: &LabeledDataset,
    alpha: f64,
    seed: u64,
    exec: Execution,
) -> Result<FittedModel> {
    let mut parts = data.split_fractions(&config.fractions()?, seed)?.into_iter();
    let train = parts.next().expect("split count checked");
    let calib = parts.next().expect("split count checked");
    // Fractions summing below one leave an unused remainder part.
    let third = if config.algorithm.splits() == 3 { parts.next() } else { None };
    let opts = config.options(seed);
    Ok(match &config.algorithm {
        AlgorithmSpec::Homoscedastic { mean } => {
            FittedModel::Homoscedastic(HomoscedasticRegionModel::fit(&train, calib, alpha, mean, &opts, exec)?)
        }
        AlgorithmSpec::HeteroKnn { mean, k } => FittedModel::HeteroKnn(HeteroscedasticRegionModel::fit(
            &train, calib, alpha, *k, mean, &opts, exec,
        )?),
        AlgorithmSpec::HeteroTuned {
            mean_k_grid,
            radius_k_grid,
            ..
        } => FittedModel::HeteroTuned(TunedKnnModel::fit(
            &train,
            calib,
            third.as_ref(),
            alpha,
            mean_k_grid,
            radius_k_grid,
            &opts,
            exec,
        )?),
        AlgorithmSpec::ConformalHetero { mean, k } => {
            FittedModel::ConformalHetero(ConformalizedHeteroModel::fit(
                &train,
                calib,
                third.expect("split count checked"),
                alpha,
                *k,
                mean,
                &opts,
                exec,
            )?)
        }
    })
}

/// A replicated simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: ScenarioSpec,
    pub algorithm: AlgorithmConfig,
    pub n: usize,
    pub n_eval: usize,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalOptions,
}

/// Seed of replicate `b`.
pub fn replicate_seed(seed: u64, b: usize) -> u64 {
    hash_words(seed, [b as u64])
}

/// Fits on a fresh sample of size `n` and evaluates on an independent sample
/// of size `n_eval`.
pub fn run_replicate(spec: &ExperimentSpec, b: usize, exec: Execution) -> Result<CoverageReport> {
    let seed = replicate_seed(spec.seed, b);
    let train = generate(&spec.scenario, spec.n, hash_words(seed, [purpose::DATA]))?;
    let eval = generate(&spec.scenario, spec.n_eval, hash_words(seed, [purpose::EVAL]))?;
    let model = fit_algorithm(&spec.algorithm, &train, spec.alpha, seed, exec)?;
    let options = EvalOptions {
        seed: hash_words(seed, [purpose::MONTE_CARLO]),
        ..spec.eval.clone()
    };
    evaluate(&model, &eval, Some(&spec.scenario), &options, exec)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self { mean, sd: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub algorithm: String,
    pub alpha: f64,
    pub replicates: usize,
    pub marginal_coverage: Summary,
    pub l2_error: Option<Summary>,
    pub mean_abs_error: Option<Summary>,
    pub region_error: Option<Summary>,
    /// Pointwise average of the replicate curves.
    pub mean_curve: Option<CoverageCurve>,
    pub runs: Vec<CoverageReport>,
}

/// Runs every replicate (concurrently when `exec` is parallel) and aggregates.
pub fn run_experiment(spec: &ExperimentSpec, exec: Execution) -> Result<ExperimentReport> {
    if spec.replicates == 0 {
        return Err(Error::InvalidParameter("replicates must be at least 1".into()));
    }
    let runs = exec.try_map(spec.replicates, |b| {
        run_replicate(spec, b, exec).map_err(|e| Error::Replicate {
            index: b,
            source: Box::new(e),
        })
    })?;
    let collect = |f: &dyn Fn(&CoverageReport) -> Option<f64>| -> Option<Summary> {
        let v: Option<Vec<f64>> = runs.iter().map(f).collect();
        v.and_then(|v| Summary::of(&v))
    };
    let mean_curve = runs[0].coverage_curve.as_ref().map(|first| {
        let curves: Vec<&CoverageCurve> = runs.iter().filter_map(|r| r.coverage_curve.as_ref()).collect();
        CoverageCurve {
            x: first.x.clone(),
            p: (0..first.x.len())
                .map(|i| curves.iter().map(|c| c.p[i]).sum::<f64>() / curves.len() as f64)
                .collect(),
        }
    });
    Ok(ExperimentReport {
        algorithm: spec.algorithm.algorithm.name().to_string(),
        alpha: spec.alpha,
        replicates: spec.replicates,
        marginal_coverage: collect(&|r| Some(r.marginal_coverage)).expect("at least one replicate"),
        l2_error: collect(&|r| r.l2_error),
        mean_abs_error: collect(&|r| r.mean_abs_error),
        region_error: collect(&|r| r.region_error),
        mean_curve,
        runs,
    })
}

//! Coverage diagnostics for fitted region models.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::regions::RegionPredictor;
use crate::rng::{purpose, stream};
use crate::simulation::ScenarioSpec;

/// Points in the default curve grid.
pub const DEFAULT_GRID_POINTS: usize = 101;

/// Whether each evaluation response falls in the region predicted at its
/// predictor.
pub fn coverage_indicators<M: RegionPredictor + ?Sized>(
    model: &M,
    eval: &LabeledDataset,
    exec: Execution,
) -> Result<Vec<bool>> {
    exec.try_map(eval.len(), |i| model.predict(eval.x(i))?.contains_ref(eval.y(i)))
}

fn fraction(ind: &[bool]) -> Result<f64> {
    if ind.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    Ok(ind.iter().filter(|b| **b).count() as f64 / ind.len() as f64)
}

pub fn marginal_coverage<M: RegionPredictor + ?Sized>(
    model: &M,
    eval: &LabeledDataset,
    exec: Execution,
) -> Result<f64> {
    fraction(&coverage_indicators(model, eval, exec)?)
}

/// Values of a function on an increasing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `0.9 · min(sd, IQR/1.34) · n^(−1/5)`, falling back to whichever spread
/// is positive.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (s.len() - 1) as f64;
        let (i, f) = (h.floor() as usize, h - h.floor());
        s[i] + f * (s[(i + 1).min(s.len() - 1)] - s[i])
    };
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => 1.0,
    };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian-kernel Nadaraya–Watson smoother of `values` against `xs`,
/// clipped to `[0, 1]`.
pub fn nadaraya_watson(xs: &[f64], values: &[f64], grid: &[f64], bandwidth: f64) -> Vec<f64> {
    grid.iter()
        .map(|&g| {
            let (mut num, mut den) = (0.0, 0.0);
            for (&x, &v) in xs.iter().zip(values) {
                let u = (x - g) / bandwidth;
                let w = (-0.5 * u * u).exp();
                num += w * v;
                den += w;
            }
            // Far outside the data every weight underflows; use the nearest point.
            let est = if den > 0.0 {
                num / den
            } else {
                let i = (0..xs.len())
                    .min_by(|&a, &b| (xs[a] - g).abs().total_cmp(&(xs[b] - g).abs()))
                    .expect("nonempty");
                values[i]
            };
            est.clamp(0.0, 1.0)
        })
        .collect()
}

/// Smoothed coverage curve from scalar predictors and indicators.
pub fn coverage_curve_from_indicators(xs: &[f64], indicators: &[bool], grid: &[f64]) -> Result<CoverageCurve> {
    if xs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let v: Vec<f64> = indicators.iter().map(|&b| f64::from(u8::from(b))).collect();
    Ok(CoverageCurve {
        x: grid.to_vec(),
        p: nadaraya_watson(xs, &v, grid, silverman_bandwidth(xs)),
    })
}

/// Conditional coverage `p̂^α(x)` on `grid` for a scalar predictor.
pub fn conditional_coverage_curve<M: RegionPredictor + ?Sized>(
    model: &M,
    eval: &LabeledDataset,
    grid: &[f64],
    exec: Execution,
) -> Result<CoverageCurve> {
    if eval.predictor_dim() != 1 {
        return Err(Error::MultivariateUnsupported(eval.predictor_dim()));
    }
    let ind = coverage_indicators(model, eval, exec)?;
    coverage_curve_from_indicators(eval.predictors(), &ind, grid)
}

fn trapezoid(x: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    (1..x.len()).map(|i| 0.5 * (x[i] - x[i - 1]) * (f(i) + f(i - 1))).sum()
}

/// `∫ (p̂(x) − (1−α))² dx` by the trapezoid rule.
pub fn l2_integrated_error(curve: &CoverageCurve, alpha: f64) -> f64 {
    trapezoid(&curve.x, |i| (curve.p[i] - (1.0 - alpha)).powi(2))
}

/// Average of `|p̂(x) − (1−α)|` over the grid's range.
pub fn mean_absolute_error(curve: &CoverageCurve, alpha: f64) -> f64 {
    let len = curve.x.last().unwrap_or(&0.0) - curve.x.first().unwrap_or(&0.0);
    if len <= 0.0 {
        return curve.p.first().map_or(0.0, |p| (p - (1.0 - alpha)).abs());
    }
    trapezoid(&curve.x, |i| (curve.p[i] - (1.0 - alpha)).abs()) / len
}

pub fn max_deviation(curve: &CoverageCurve, alpha: f64) -> f64 {
    curve.p.iter().map(|p| (p - (1.0 - alpha)).abs()).fold(0.0, f64::max)
}

/// Monte-Carlo estimate of `E[P(Y ∈ C̃(X) △ C^α(X) | X)]` from `mc_draws`
/// fresh pairs.
pub fn symmetric_difference_error<M: RegionPredictor + ?Sized>(
    model: &M,
    spec: &ScenarioSpec,
    alpha: f64,
    mc_draws: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if !spec.has_oracle_region() {
        return Err(Error::UnsupportedScenario("wasserstein_example"));
    }
    if mc_draws == 0 {
        return Err(Error::EmptyEvalSet);
    }
    let data = crate::simulation::generate_with(spec, mc_draws, &mut stream(seed, &[purpose::MONTE_CARLO]))?;
    let mismatch = exec.try_map(mc_draws, |i| {
        let x = data.x(i);
        let y = data.y(i);
        let est = model.predict_at(x, alpha)?.contains_ref(y)?;
        let oracle = spec.oracle_region(x, alpha)?.contains_ref(y)?;
        Ok(est != oracle)
    })?;
    fraction(&mismatch)
}

/// Coverage within one predictor bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub coordinate: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub coverage: Option<f64>,
}

/// Marginal coverage within `bins` equal-width bins of each predictor
/// coordinate.
pub fn stratified_coverage(eval: &LabeledDataset, indicators: &[bool], bins: usize) -> Result<Vec<Stratum>> {
    if eval.is_empty() || bins == 0 {
        return Err(Error::EmptyEvalSet);
    }
    let p = eval.predictor_dim();
    let mut out = Vec::with_capacity(p * bins);
    for j in 0..p {
        let col = (0..eval.len()).map(|i| eval.x(i)[j]);
        let lo = col.clone().fold(f64::INFINITY, f64::min);
        let hi = col.fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let mut hit = vec![0usize; bins];
        let mut count = vec![0usize; bins];
        for (i, &b) in indicators.iter().enumerate() {
            let k = if width > 0.0 {
                (((eval.x(i)[j] - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            count[k] += 1;
            hit[k] += usize::from(b);
        }
        for k in 0..bins {
            out.push(Stratum {
                coordinate: j,
                lo: lo + width * k as f64,
                hi: lo + width * (k + 1) as f64,
                count: count[k],
                coverage: (count[k] > 0).then(|| hit[k] as f64 / count[k] as f64),
            });
        }
    }
    Ok(out)
}

/// Settings for [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub grid_points: usize,
    /// Curve range; defaults to the scenario's predictor range, else the data
    /// range.
    pub grid_range: Option<(f64, f64)>,
    /// Monte-Carlo pairs for the region error; 0 skips it.
    pub mc_draws: usize,
    pub strata_bins: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            grid_points: DEFAULT_GRID_POINTS,
            grid_range: None,
            mc_draws: 0,
            strata_bins: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub n_eval: usize,
    pub marginal_coverage: f64,
    pub coverage_curve: Option<CoverageCurve>,
    pub l2_error: Option<f64>,
    pub mean_abs_error: Option<f64>,
    pub max_deviation: Option<f64>,
    pub region_error: Option<f64>,
    /// Only for multivariate predictors.
    pub strata: Option<Vec<Stratum>>,
}

/// Full coverage report of `model` on `eval`.
pub fn evaluate<M: RegionPredictor + ?Sized>(
    model: &M,
    eval: &LabeledDataset,
    spec: Option<&ScenarioSpec>,
    options: &EvalOptions,
    exec: Execution,
) -> Result<CoverageReport> {
    let alpha = model.alpha();
    let ind = coverage_indicators(model, eval, exec)?;
    let marginal = fraction(&ind)?;
    let (curve, strata) = if eval.predictor_dim() == 1 {
        let xs = eval.predictors();
        let (lo, hi) = options.grid_range.or(spec.map(|s| s.predictor_range())).unwrap_or_else(|| {
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        });
        let grid = linspace(lo, hi, options.grid_points.max(2));
        (Some(coverage_curve_from_indicators(xs, &ind, &grid)?), None)
    } else {
        (None, Some(stratified_coverage(eval, &ind, options.strata_bins.max(1))?))
    };
    let region_error = match spec {
        Some(s) if options.mc_draws > 0 && s.has_oracle_region() => Some(symmetric_difference_error(
            model,
            s,
            alpha,
            options.mc_draws,
            options.seed,
            exec,
        )?),
        _ => None,
    };
    Ok(CoverageReport {
        alpha,
        n_eval: eval.len(),
        marginal_coverage: marginal,
        l2_error: curve.as_ref().map(|c| l2_integrated_error(c, alpha)),
        mean_abs_error: curve.as_ref().map(|c| mean_absolute_error(c, alpha)),
        max_deviation: curve.as_ref().map(|c| max_deviation(c, alpha)),
        coverage_curve: curve,
        region_error,
        strata,
    })
}

//! Synthetic scenarios with known conditional laws, and their oracle regions.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};
use statrs::function::gamma::gamma_lr;

use crate::dataset::{LabeledDataset, Responses};
use crate::error::{Error, Result};
use crate::metric::{MetricKind, QuantileGrid, ResponsePoint};
use crate::regions::PredictionRegion;
use crate::rng::{purpose, stream, StreamRng};

/// Curves averaged for the Monte-Carlo mean noise profile of
/// [`ScenarioSpec::WassersteinExample`].
pub const PROFILE_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScenarioSpec {
    /// `Y = 3 + X + Xε`, `ε ~ U(−1, 1)`.
    Setting1,
    /// `Y = 3 + eˣ + Xε`, `ε ~ U(−1, 1)`.
    Setting2,
    /// `Y = 3 + eˣ + Xε`, `ε ~ N(0, 4)`.
    Setting3,
    /// `Y = X + ε`, `ε ~ U(0, 5)`.
    Setting4,
    /// `Y | X = x ~ N_p(μ(x)·1, σ²(x)·I)` with `μ(x) = 5 + Σxⱼ` and
    /// `σ(x) = 1` or `4 + Σxⱼ`; `X ~ U[0,1]^d`.
    GaussianMulti { p: usize, d: usize, heteroscedastic: bool },
    /// Empirical quantile function of `g(X) + ε(j)`, `j = 1..n_obs_per_curve`,
    /// on the standard grid, with `g(x) = g₀ + Σ gⱼ xⱼ` and `X ~ U[0,1]^d`,
    /// `d = len(g) − 1`.
    WassersteinExample {
        n_obs_per_curve: usize,
        sigma_eps: f64,
        g: Vec<f64>,
    },
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        match self {
            Self::GaussianMulti { p, d, .. } if *p == 0 || *d == 0 => bad("p and d must be at least 1"),
            Self::WassersteinExample {
                n_obs_per_curve,
                sigma_eps,
                g,
            } => {
                if *n_obs_per_curve == 0 {
                    bad("n_obs_per_curve must be at least 1")
                } else if !(*sigma_eps > 0.0 && sigma_eps.is_finite()) {
                    bad("sigma_eps must be positive")
                } else if g.len() < 2 || g.iter().any(|v| !v.is_finite()) {
                    bad("g needs an intercept and at least one finite slope")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn predictor_dim(&self) -> usize {
        match self {
            Self::GaussianMulti { d, .. } => *d,
            Self::WassersteinExample { g, .. } => g.len().saturating_sub(1),
            _ => 1,
        }
    }

    /// Support of each predictor coordinate.
    pub fn predictor_range(&self) -> (f64, f64) {
        match self {
            Self::GaussianMulti { .. } | Self::WassersteinExample { .. } => (0.0, 1.0),
            _ => (0.0, 5.0),
        }
    }

    pub fn default_region_metric(&self) -> MetricKind {
        match self {
            Self::WassersteinExample { .. } => MetricKind::Wasserstein2,
            _ => MetricKind::EuclideanL2,
        }
    }

    pub fn sample_x<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let (lo, hi) = self.predictor_range();
        (0..self.predictor_dim()).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Draws `Y | X = x`.
    pub fn sample_y<R: Rng>(&self, x: &[f64], rng: &mut R) -> ResponsePoint {
        let unif = |rng: &mut R| rng.random_range(-1.0..1.0);
        match self {
            Self::Setting1 => ResponsePoint::euclidean(vec![3.0 + x[0] + x[0] * unif(rng)]),
            Self::Setting2 => ResponsePoint::euclidean(vec![3.0 + x[0].exp() + x[0] * unif(rng)]),
            Self::Setting3 => {
                let e: f64 = rng.sample(StandardNormal);
                ResponsePoint::euclidean(vec![3.0 + x[0].exp() + x[0] * 2.0 * e])
            }
            Self::Setting4 => ResponsePoint::euclidean(vec![x[0] + rng.random_range(0.0..5.0)]),
            Self::GaussianMulti {
                p,
                heteroscedastic,
                ..
            } => {
                let (mu, sigma) = gaussian_params(x, *heteroscedastic);
                ResponsePoint::euclidean(
                    (0..*p)
                        .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            }
            Self::WassersteinExample {
                n_obs_per_curve,
                sigma_eps,
                g,
            } => {
                let noise = Normal::new(0.0, *sigma_eps).expect("validated sigma");
                let shift = linear(g, x);
                let mut z: Vec<f64> = (0..*n_obs_per_curve).map(|_| shift + noise.sample(rng)).collect();
                z.sort_by(f64::total_cmp);
                let grid = QuantileGrid::standard();
                let values = empirical_quantiles(&z, grid.levels());
                ResponsePoint::Quantile { grid, values }
            }
        }
    }

    /// The conditional Fréchet mean `m(x)`. For the Wasserstein scenario the
    /// noise profile is a Monte-Carlo average of [`PROFILE_DRAWS`] curves.
    pub fn conditional_mean(&self, x: &[f64]) -> Result<ResponsePoint> {
        self.check_x(x)?;
        Ok(match self {
            Self::Setting1 => ResponsePoint::euclidean(vec![3.0 + x[0]]),
            Self::Setting2 | Self::Setting3 => ResponsePoint::euclidean(vec![3.0 + x[0].exp()]),
            Self::Setting4 => ResponsePoint::euclidean(vec![x[0] + 2.5]),
            Self::GaussianMulti {
                p,
                heteroscedastic,
                ..
            } => ResponsePoint::euclidean(vec![gaussian_params(x, *heteroscedastic).0; *p]),
            Self::WassersteinExample {
                n_obs_per_curve,
                sigma_eps,
                g,
            } => {
                let shift = linear(g, x);
                let profile = wasserstein_noise_profile(*n_obs_per_curve, *sigma_eps, PROFILE_DRAWS, 0)?;
                ResponsePoint::Quantile {
                    grid: QuantileGrid::standard(),
                    values: profile.iter().map(|v| v + shift).collect(),
                }
            }
        })
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        self.validate()?;
        if x.len() != self.predictor_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.predictor_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// The oracle region at level `1 − alpha`.
    pub fn oracle_region(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        self.check_x(x)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {alpha} must lie in (0, 1)")));
        }
        let level = 1.0 - alpha;
        let (radius, metric) = match self {
            Self::Setting1 | Self::Setting2 => (x[0] * level, MetricKind::EuclideanL2),
            Self::Setting3 => (x[0] * 2.0 * normal_quantile(1.0 - alpha / 2.0), MetricKind::EuclideanL2),
            Self::Setting4 => (2.5 * level, MetricKind::EuclideanL2),
            Self::GaussianMulti {
                p,
                heteroscedastic,
                ..
            } => {
                let sigma = gaussian_params(x, *heteroscedastic).1;
                (sigma * chi_square_quantile(*p, level).sqrt(), MetricKind::EuclideanSup)
            }
            Self::WassersteinExample { .. } => return Err(Error::UnsupportedScenario("wasserstein_example")),
        };
        Ok(PredictionRegion::new(self.conditional_mean(x)?, radius, metric))
    }

    pub fn has_oracle_region(&self) -> bool {
        !matches!(self, Self::WassersteinExample { .. })
    }
}

fn gaussian_params(x: &[f64], heteroscedastic: bool) -> (f64, f64) {
    let s: f64 = x.iter().sum();
    (5.0 + s, if heteroscedastic { 4.0 + s } else { 1.0 })
}

/// `g₀ + Σ gⱼ xⱼ`; also the scalar signal of the Wasserstein scenario.
pub fn linear(g: &[f64], x: &[f64]) -> f64 {
    g[0] + g[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
}

/// `Qₙ(ρ) = inf{t : Fₙ(t) ≥ ρ}` of an already sorted sample.
pub fn empirical_quantiles(sorted: &[f64], levels: &[f64]) -> Vec<f64> {
    let n = sorted.len();
    levels
        .iter()
        .map(|&rho| {
            let x = rho * n as f64;
            let j = (x - 1e-9 * x.max(1.0)).ceil().clamp(1.0, n as f64) as usize;
            sorted[j - 1]
        })
        .collect()
}

/// Mean quantile curve of `n_obs` i.i.d. `N(0, σ²)` draws on the standard
/// grid, averaged over `draws` curves.
pub fn wasserstein_noise_profile(n_obs: usize, sigma: f64, draws: usize, seed: u64) -> Result<Vec<f64>> {
    if n_obs == 0 || draws == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidParameter("profile needs n_obs, draws ≥ 1 and σ > 0".into()));
    }
    let grid = QuantileGrid::standard();
    let mut rng = stream(seed, &[purpose::ORACLE, n_obs as u64, sigma.to_bits()]);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut acc = vec![0.0; grid.len()];
    let mut z = vec![0.0; n_obs];
    for _ in 0..draws {
        z.iter_mut().for_each(|v| *v = noise.sample(&mut rng));
        z.sort_by(f64::total_cmp);
        for (a, q) in acc.iter_mut().zip(empirical_quantiles(&z, grid.levels())) {
            *a += q;
        }
    }
    Ok(acc.into_iter().map(|a| a / draws as f64).collect())
}

/// `n` i.i.d. pairs from `spec`, reproducible from `seed`.
pub fn generate(spec: &ScenarioSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    generate_with(spec, n, &mut stream(seed, &[purpose::DATA]))
}

/// `n` i.i.d. pairs drawn from an existing stream.
pub fn generate_with(spec: &ScenarioSpec, n: usize, rng: &mut StreamRng) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, have: 0 });
    }
    let d = spec.predictor_dim();
    let mut xs = Vec::with_capacity(n * d);
    let first_x = spec.sample_x(rng);
    let first_y = spec.sample_y(&first_x, rng);
    let mut responses = Responses::empty_like(first_y.as_ref());
    xs.extend_from_slice(&first_x);
    responses.push(&first_y)?;
    for _ in 1..n {
        let x = spec.sample_x(rng);
        let y = spec.sample_y(&x, rng);
        xs.extend_from_slice(&x);
        responses.push(&y)?;
    }
    LabeledDataset::new(d, xs, responses)
}

/// `n` responses drawn at the fixed predictor `x`.
pub fn generate_at(spec: &ScenarioSpec, x: &[f64], n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.check_x(x)?;
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, have: 0 });
    }
    let mut rng = stream(seed, &[purpose::DATA, 1]);
    let ys: Vec<ResponsePoint> = (0..n).map(|_| spec.sample_y(x, &mut rng)).collect();
    LabeledDataset::from_rows(vec![x.to_vec(); n], &ys)
}

/// Standard normal quantile.
pub fn normal_quantile(level: f64) -> f64 {
    NormalDist::standard().inverse_cdf(level)
}

/// Inverse χ²_p CDF by bisection on the regularised lower incomplete gamma
/// function, to absolute tolerance 1e-10.
pub fn chi_square_quantile(p: usize, level: f64) -> f64 {
    assert!(p >= 1, "degrees of freedom must be positive");
    assert!(level > 0.0 && level < 1.0, "level must lie in (0, 1)");
    let a = p as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(a, x / 2.0);
    let (mut lo, mut hi) = (0.0, p as f64 + 1.0);
    while cdf(hi) < level {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

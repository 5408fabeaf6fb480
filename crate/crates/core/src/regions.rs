//! Prediction regions `𝓑(m̃(x), r̃(x))`: metric balls around a fitted
//! conditional Fréchet mean.
//!
//! Four calibration schemes are provided:
//!
//! * [`HomoscedasticRegionModel`]: one global radius, the conformal order
//!   statistic `⌈(n₂+1)(1−α)⌉` of the calibration residuals.
//! * [`HeteroscedasticRegionModel`]: the same order statistic taken over the
//!   residuals of the `k` calibration points nearest to the query.
//! * [`TunedKnnModel`]: the kNN scheme with the mean's `k` picked by
//!   leave-one-out risk and the radius `k` picked by marginal coverage.
//! * [`ConformalizedHeteroModel`]: the kNN radius shifted by a conformal offset
//!   computed on a third split.
//!
//! When randomised tie-breaking is on, each residual carries a pseudo-random
//! key derived from its response, residuals are ordered by `(value, key)`, and
//! a query response lying exactly on the boundary is admitted only if its key
//! does not exceed the key of the selected order statistic. This makes ranks
//! almost surely distinct for discrete-valued data.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::frechet::{
    normalize_k_grid, row_hashes, KnnFrechetModel, LooSelection, MeanEstimator, MeanSpec,
};
use crate::metric::{distance, MetricKind, PointRef, ResponsePoint};
use crate::neighbors::nearest;
use crate::rng::{hash_reals, purpose, splitmix64};

mod serde_radius {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &f64, s: S) -> Result<S::Ok, S::Error> {
        if r.is_finite() {
            s.serialize_f64(*r)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Boundary rule for randomised tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieBreak {
    pub seed: u64,
    pub threshold: u64,
}

/// Tie key of a response under `seed`.
#[inline]
pub fn response_key(seed: u64, y: PointRef<'_>) -> u64 {
    splitmix64(seed ^ hash_reals(0, y.values()))
}

/// A closed metric ball. An infinite radius is the whole space and is
/// serialised as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRegion {
    pub center: ResponsePoint,
    #[serde(with = "serde_radius")]
    pub radius: f64,
    pub region_metric: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_break: Option<TieBreak>,
}

impl PredictionRegion {
    pub fn new(center: ResponsePoint, radius: f64, region_metric: MetricKind) -> Self {
        Self {
            center,
            radius,
            region_metric,
            tie_break: None,
        }
    }

    pub fn contains(&self, y: &ResponsePoint) -> Result<bool> {
        self.contains_ref(y.as_ref())
    }

    pub fn contains_ref(&self, y: PointRef<'_>) -> Result<bool> {
        self.region_metric.check(y)?;
        if self.radius == f64::INFINITY {
            return Ok(true);
        }
        let d = distance(self.region_metric, self.center.as_ref(), y)?;
        Ok(admits(d, self.radius, self.tie_break, y))
    }
}

#[inline]
fn admits(d: f64, radius: f64, tie: Option<TieBreak>, y: PointRef<'_>) -> bool {
    if d != radius {
        return d < radius;
    }
    match tie {
        None => true,
        Some(t) => response_key(t.seed, y) <= t.threshold,
    }
}

/// 1-based rank `⌈(n+1)·level⌉` of the conformal order statistic.
pub fn conformal_rank(n: usize, level: f64) -> usize {
    let x = (n as f64 + 1.0) * level;
    // Absorb representation error such as 5 × 0.8 = 4.000000000000001.
    (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("level {level} must lie in (0, 1)")))
    }
}

/// The selected order statistic and its tie key.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderStat {
    value: f64,
    key: u64,
}

/// `⌈(n+1)·level⌉`-th smallest of `values` under `(value, key, index)`
/// ordering; `None` when the rank exceeds `n`.
fn order_statistic(values: &[f64], keys: Option<&[u64]>, level: f64) -> Result<Option<OrderStat>> {
    check_level(level)?;
    if values.is_empty() {
        return Err(Error::EmptyValues);
    }
    let j = conformal_rank(values.len(), level);
    if j > values.len() {
        return Ok(None);
    }
    let key = |i: usize| keys.map_or(0, |k| k[i]);
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let (_, &mut pick, _) = idx.select_nth_unstable_by(j - 1, |&a, &b| {
        values[a]
            .total_cmp(&values[b])
            .then(key(a).cmp(&key(b)))
            .then(a.cmp(&b))
    });
    Ok(Some(OrderStat {
        value: values[pick],
        key: key(pick),
    }))
}

fn to_radius(stat: Option<OrderStat>, tie_seed: Option<u64>) -> (f64, Option<TieBreak>) {
    match stat {
        None => (f64::INFINITY, None),
        Some(s) => (
            s.value,
            tie_seed.map(|seed| TieBreak {
                seed,
                threshold: s.key,
            }),
        ),
    }
}

/// Conformal empirical quantile: the `⌈(n+1)·level⌉`-th smallest value, or
/// `+∞` when that rank exceeds `n`. With `randomized`, exact ties are ordered
/// by seeded keys so ranks are distinct; the returned value is unaffected.
pub fn empirical_quantile(values: &[f64], level: f64, randomized: bool, seed: u64) -> Result<f64> {
    let keys: Option<Vec<u64>> =
        randomized.then(|| (0..values.len()).map(|i| splitmix64(seed ^ splitmix64(i as u64))).collect());
    Ok(to_radius(order_statistic(values, keys.as_deref(), level)?, None).0)
}

/// Metric and tie-breaking choices shared by every algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionOptions {
    /// Fitting metric d₁; defaults to Euclidean L² or Wasserstein-2.
    pub fit_metric: Option<MetricKind>,
    /// Region metric d₂; defaults to d₁.
    pub region_metric: Option<MetricKind>,
    /// Defaults to on for `quantile-sup`, off otherwise.
    pub randomized_ties: Option<bool>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Resolved {
    fit: MetricKind,
    region: MetricKind,
    randomized: bool,
}

impl RegionOptions {
    fn resolve(&self, sample: PointRef<'_>) -> Result<Resolved> {
        let fit = self.fit_metric.unwrap_or_else(|| MetricKind::default_for(sample));
        let region = self.region_metric.unwrap_or(fit);
        fit.check(sample)?;
        region.check(sample)?;
        Ok(Resolved {
            fit,
            region,
            randomized: self
                .randomized_ties
                .unwrap_or(region == MetricKind::QuantileSup),
        })
    }

    fn tie_seed(&self) -> u64 {
        splitmix64(self.seed ^ purpose::TIES)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("alpha {alpha} must lie in (0, 1)")))
    }
}

/// Calibration pairs with their residuals `r̃ᵢ = d₂(Yᵢ, m̃(Xᵢ))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "StoreFields")]
pub struct CalibrationStore {
    data: LabeledDataset,
    residuals: Vec<f64>,
    #[serde(skip)]
    row_hashes: Vec<u64>,
    #[serde(skip)]
    response_hashes: Vec<u64>,
}

#[derive(Deserialize)]
struct StoreFields {
    data: LabeledDataset,
    residuals: Vec<f64>,
}

impl TryFrom<StoreFields> for CalibrationStore {
    type Error = Error;
    fn try_from(f: StoreFields) -> Result<Self> {
        CalibrationStore::from_parts(f.data, f.residuals)
    }
}

impl CalibrationStore {
    /// Computes residuals of `data` around `mean` under `region_metric`.
    pub fn build(
        mean: &MeanEstimator,
        data: LabeledDataset,
        region_metric: MetricKind,
        exec: Execution,
    ) -> Result<Self> {
        let residuals = exec.try_map(data.len(), |i| {
            let center = mean.predict(data.x(i))?;
            distance(region_metric, data.y(i), center.as_ref())
        })?;
        Self::from_parts(data, residuals)
    }

    pub fn from_parts(data: LabeledDataset, residuals: Vec<f64>) -> Result<Self> {
        if residuals.len() != data.len() {
            return Err(Error::DimensionMismatch {
                expected: data.len(),
                found: residuals.len(),
            });
        }
        if let Some(r) = residuals.iter().find(|r| r.is_nan() || **r < 0.0) {
            return Err(Error::InvalidParameter(format!("residual {r} is negative or NaN")));
        }
        let row_hashes = row_hashes(&data);
        let response_hashes = (0..data.len())
            .map(|i| hash_reals(0, data.y(i).values()))
            .collect();
        Ok(Self {
            data,
            residuals,
            row_hashes,
            response_hashes,
        })
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn data(&self) -> &LabeledDataset {
        &self.data
    }

    fn residual_keys(&self, seed: u64) -> Vec<u64> {
        self.response_hashes.iter().map(|h| splitmix64(seed ^ h)).collect()
    }

    /// Calibration rows nearest to `x`, nearest first.
    fn neighbors(&self, x: &[f64], k: usize, exclude: Option<usize>, seed: u64) -> Result<Vec<usize>> {
        let p = self.data.predictor_dim();
        if x.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: x.len(),
            });
        }
        Ok(nearest(self.data.predictors(), p, x, k, exclude, |i| {
            splitmix64(seed ^ self.row_hashes[i])
        }))
    }
}

/// Region model with a single calibrated radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomoscedasticRegionModel {
    mean: MeanEstimator,
    calibration: CalibrationStore,
    alpha: f64,
    #[serde(with = "serde_radius")]
    calibrated_radius: f64,
    region_metric: MetricKind,
    randomized_ties: bool,
    tie_seed: u64,
}

impl HomoscedasticRegionModel {
    /// Fits `m̃` on `train` and calibrates the radius on `test`.
    pub fn fit(
        train: &LabeledDataset,
        test: LabeledDataset,
        alpha: f64,
        mean_spec: &MeanSpec,
        options: &RegionOptions,
        exec: Execution,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let r = options.resolve(train.y(0))?;
        let mean = MeanEstimator::fit(mean_spec, train, r.fit, options.seed, exec)?;
        let calibration = CalibrationStore::build(&mean, test, r.region, exec)?;
        Self::from_parts(mean, calibration, alpha, r.region, r.randomized, options.tie_seed())
    }

    pub fn from_parts(
        mean: MeanEstimator,
        calibration: CalibrationStore,
        alpha: f64,
        region_metric: MetricKind,
        randomized_ties: bool,
        tie_seed: u64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let mut model = Self {
            mean,
            calibration,
            alpha,
            calibrated_radius: 0.0,
            region_metric,
            randomized_ties,
            tie_seed,
        };
        model.calibrated_radius = model.radius_at(alpha)?.0;
        Ok(model)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn calibrated_radius(&self) -> f64 {
        self.calibrated_radius
    }

    pub fn mean(&self) -> &MeanEstimator {
        &self.mean
    }

    pub fn calibration(&self) -> &CalibrationStore {
        &self.calibration
    }

    /// Global radius at level `1 − alpha`.
    pub fn radius_at(&self, alpha: f64) -> Result<(f64, Option<TieBreak>)> {
        check_alpha(alpha)?;
        let keys = self
            .randomized_ties
            .then(|| self.calibration.residual_keys(self.tie_seed));
        let stat = order_statistic(self.calibration.residuals(), keys.as_deref(), 1.0 - alpha)?;
        Ok(to_radius(stat, self.randomized_ties.then_some(self.tie_seed)))
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictionRegion> {
        self.predict_at(x, self.alpha)
    }

    pub fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        let (radius, tie_break) = if alpha == self.alpha && !self.randomized_ties {
            (self.calibrated_radius, None)
        } else {
            self.radius_at(alpha)?
        };
        Ok(PredictionRegion {
            center: self.mean.predict(x)?,
            radius,
            region_metric: self.region_metric,
            tie_break,
        })
    }
}

/// Region model whose radius is a local order statistic over the `k`
/// calibration points nearest to the query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeteroscedasticRegionModel {
    mean: MeanEstimator,
    calibration: CalibrationStore,
    k: usize,
    alpha: f64,
    region_metric: MetricKind,
    randomized_ties: bool,
    tie_seed: u64,
}

impl HeteroscedasticRegionModel {
    pub fn fit(
        train: &LabeledDataset,
        test: LabeledDataset,
        alpha: f64,
        k: usize,
        mean_spec: &MeanSpec,
        options: &RegionOptions,
        exec: Execution,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let r = options.resolve(train.y(0))?;
        let mean = MeanEstimator::fit(mean_spec, train, r.fit, options.seed, exec)?;
        let calibration = CalibrationStore::build(&mean, test, r.region, exec)?;
        Self::from_parts(mean, calibration, k, alpha, r.region, r.randomized, options.tie_seed())
    }

    pub fn from_parts(
        mean: MeanEstimator,
        calibration: CalibrationStore,
        k: usize,
        alpha: f64,
        region_metric: MetricKind,
        randomized_ties: bool,
        tie_seed: u64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        if k == 0 || k > calibration.len() {
            return Err(Error::KTooLarge {
                k,
                available: calibration.len(),
            });
        }
        Ok(Self {
            mean,
            calibration,
            k,
            alpha,
            region_metric,
            randomized_ties,
            tie_seed,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mean(&self) -> &MeanEstimator {
        &self.mean
    }

    pub fn calibration(&self) -> &CalibrationStore {
        &self.calibration
    }

    fn with_k(&self, k: usize) -> Result<Self> {
        let mut m = self.clone();
        if k == 0 || k > m.calibration.len() {
            return Err(Error::KTooLarge {
                k,
                available: m.calibration.len(),
            });
        }
        m.k = k;
        Ok(m)
    }

    fn query_seed(&self, x: &[f64]) -> u64 {
        splitmix64(self.tie_seed ^ hash_reals(0, x))
    }

    /// Local radius at `x` from the first `k` entries of `neighbors`.
    fn radius_from(
        &self,
        neighbors: &[usize],
        alpha: f64,
        query_seed: u64,
    ) -> Result<(f64, Option<TieBreak>)> {
        let res = self.calibration.residuals();
        let values: Vec<f64> = neighbors.iter().map(|&i| res[i]).collect();
        let keys: Option<Vec<u64>> = self.randomized_ties.then(|| {
            neighbors
                .iter()
                .map(|&i| splitmix64(query_seed ^ self.calibration.response_hashes[i]))
                .collect()
        });
        let stat = order_statistic(&values, keys.as_deref(), 1.0 - alpha)?;
        Ok(to_radius(stat, self.randomized_ties.then_some(query_seed)))
    }

    /// Radius of the region at `x` for level `1 − alpha`.
    pub fn radius_at(&self, x: &[f64], alpha: f64) -> Result<(f64, Option<TieBreak>)> {
        check_alpha(alpha)?;
        let nb = self.calibration.neighbors(x, self.k, None, self.tie_seed)?;
        self.radius_from(&nb, alpha, self.query_seed(x))
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictionRegion> {
        self.predict_at(x, self.alpha)
    }

    pub fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        let (radius, tie_break) = self.radius_at(x, alpha)?;
        Ok(PredictionRegion {
            center: self.mean.predict(x)?,
            radius,
            region_metric: self.region_metric,
            tie_break,
        })
    }
}

/// Data on which marginal coverage is measured when tuning the radius `k`.
#[derive(Debug, Clone, Copy)]
pub enum TuneData<'a> {
    /// A split disjoint from the calibration store.
    HeldOut(&'a LabeledDataset),
    /// The calibration store itself, each point left out of its own
    /// neighbourhood.
    CalibrationLeaveOneOut,
}

/// Marginal coverage per candidate `k` and the selected value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTuning {
    pub k_grid: Vec<usize>,
    pub coverage: Vec<f64>,
    pub best_k: usize,
}

/// Picks the `k` whose marginal coverage on `tune` is closest to `1 − α`
/// (smallest `k` on ties).
pub fn tune_k_marginal(
    model: &HeteroscedasticRegionModel,
    k_grid: &[usize],
    tune: TuneData<'_>,
    alpha: f64,
    exec: Execution,
) -> Result<KTuning> {
    check_alpha(alpha)?;
    let store = &model.calibration;
    let (n, available) = match tune {
        TuneData::HeldOut(d) => (d.len(), store.len()),
        TuneData::CalibrationLeaveOneOut => (store.len(), store.len().saturating_sub(1)),
    };
    if n == 0 {
        return Err(Error::EmptyEvalSet);
    }
    let grid = normalize_k_grid(k_grid, available)?;
    let kmax = *grid.last().expect("nonempty");
    let hits = exec.try_map(n, |i| -> Result<Vec<bool>> {
        let (x, residual, y_hash, exclude) = match tune {
            TuneData::HeldOut(d) => {
                let center = model.mean.predict(d.x(i))?;
                let r = distance(model.region_metric, d.y(i), center.as_ref())?;
                (d.x(i), r, hash_reals(0, d.y(i).values()), None)
            }
            TuneData::CalibrationLeaveOneOut => (
                store.data.x(i),
                store.residuals[i],
                store.response_hashes[i],
                Some(i),
            ),
        };
        let nb = store.neighbors(x, kmax, exclude, model.tie_seed)?;
        let qseed = model.query_seed(x);
        grid.iter()
            .map(|&k| {
                let (radius, tie) = model.radius_from(&nb[..k], alpha, qseed)?;
                Ok(if residual != radius {
                    residual < radius
                } else {
                    tie.is_none_or(|t| splitmix64(t.seed ^ y_hash) <= t.threshold)
                })
            })
            .collect()
    })?;
    let coverage: Vec<f64> = (0..grid.len())
        .map(|j| hits.iter().filter(|h| h[j]).count() as f64 / n as f64)
        .collect();
    let target = 1.0 - alpha;
    let best = (0..grid.len()).fold(0, |b, j| {
        if (coverage[j] - target).abs() < (coverage[b] - target).abs() {
            j
        } else {
            b
        }
    });
    Ok(KTuning {
        best_k: grid[best],
        k_grid: grid,
        coverage,
    })
}

/// Summary of the leave-one-out stage that chose the mean's `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanKSelection {
    pub k_grid: Vec<usize>,
    pub risk: Vec<f64>,
    pub best_k: usize,
}

impl From<&LooSelection> for MeanKSelection {
    fn from(s: &LooSelection) -> Self {
        Self {
            k_grid: s.k_grid.clone(),
            risk: s.risk.clone(),
            best_k: s.best_k,
        }
    }
}

/// Two-stage tuned kNN region model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunedKnnModel {
    base: HeteroscedasticRegionModel,
    mean_selection: Option<MeanKSelection>,
    tuning: KTuning,
}

impl TunedKnnModel {
    /// Stage 1 selects the kNN mean's `k` on `train` by leave-one-out risk
    /// over `mean_k_grid`. Stage 2 selects the radius `k` over `radius_k_grid`
    /// by marginal coverage on `tune` (or leave-one-out on `calib`).
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        train: &LabeledDataset,
        calib: LabeledDataset,
        tune: Option<&LabeledDataset>,
        alpha: f64,
        mean_k_grid: &[usize],
        radius_k_grid: &[usize],
        options: &RegionOptions,
        exec: Execution,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let r = options.resolve(train.y(0))?;
        let mean_grid: Vec<usize> = mean_k_grid
            .iter()
            .copied()
            .filter(|&k| k >= 1 && k < train.len())
            .collect();
        let (mean_k, mean_selection) = if mean_grid.is_empty() {
            (1, None)
        } else {
            let s = crate::frechet::loo_select_k(train, r.fit, &mean_grid, options.seed, exec)?;
            (s.best_k, Some(MeanKSelection::from(&s)))
        };
        let mean = MeanEstimator::Knn(KnnFrechetModel::new(
            train.clone(),
            mean_k,
            r.fit,
            options.seed,
        )?);
        let calibration = CalibrationStore::build(&mean, calib, r.region, exec)?;
        let available = match tune {
            Some(_) => calibration.len(),
            None => calibration.len().saturating_sub(1),
        };
        let radius_grid: Vec<usize> = radius_k_grid
            .iter()
            .copied()
            .filter(|&k| k >= 1 && k <= available)
            .collect();
        if radius_grid.is_empty() {
            return Err(Error::KGridEmpty);
        }
        let base = HeteroscedasticRegionModel::from_parts(
            mean,
            calibration,
            radius_grid[0],
            alpha,
            r.region,
            r.randomized,
            options.tie_seed(),
        )?;
        let data = tune.map_or(TuneData::CalibrationLeaveOneOut, TuneData::HeldOut);
        let tuning = tune_k_marginal(&base, &radius_grid, data, alpha, exec)?;
        let base = base.with_k(tuning.best_k)?;
        Ok(Self {
            base,
            mean_selection,
            tuning,
        })
    }

    pub fn base(&self) -> &HeteroscedasticRegionModel {
        &self.base
    }

    pub fn mean_selection(&self) -> Option<&MeanKSelection> {
        self.mean_selection.as_ref()
    }

    pub fn tuning(&self) -> &KTuning {
        &self.tuning
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictionRegion> {
        self.base.predict(x)
    }

    pub fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        self.base.predict_at(x, alpha)
    }
}

/// kNN radius plus a conformal offset calibrated on a third split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformalizedHeteroModel {
    base: HeteroscedasticRegionModel,
    scoring: CalibrationStore,
    offset: f64,
}

impl ConformalizedHeteroModel {
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        train: &LabeledDataset,
        test: LabeledDataset,
        test2: LabeledDataset,
        alpha: f64,
        k: usize,
        mean_spec: &MeanSpec,
        options: &RegionOptions,
        exec: Execution,
    ) -> Result<Self> {
        let base = HeteroscedasticRegionModel::fit(train, test, alpha, k, mean_spec, options, exec)?;
        let scoring = CalibrationStore::build(&base.mean, test2, base.region_metric, exec)?;
        Self::from_parts(base, scoring, exec)
    }

    /// Combines a fitted kNN radius model with a scoring split whose
    /// residuals are taken around the same mean.
    pub fn from_parts(
        base: HeteroscedasticRegionModel,
        scoring: CalibrationStore,
        exec: Execution,
    ) -> Result<Self> {
        let mut m = Self {
            base,
            scoring,
            offset: 0.0,
        };
        m.offset = m.offset_at(m.base.alpha, exec)?;
        Ok(m)
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn base(&self) -> &HeteroscedasticRegionModel {
        &self.base
    }

    /// Conformal quantile of `Sᵢ = d₂(Yᵢ, m̃(Xᵢ)) − r̃(Xᵢ)` on the scoring
    /// split.
    pub fn offset_at(&self, alpha: f64, exec: Execution) -> Result<f64> {
        let data = self.scoring.data();
        let scores = exec.try_map(data.len(), |i| {
            let (r, _) = self.base.radius_at(data.x(i), alpha)?;
            Ok(self.scoring.residuals[i] - r)
        })?;
        empirical_quantile(&scores, 1.0 - alpha, false, 0)
    }

    fn combine(local: f64, offset: f64) -> f64 {
        if local == f64::INFINITY || offset == f64::INFINITY {
            f64::INFINITY
        } else {
            (local + offset).max(0.0)
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictionRegion> {
        let (local, _) = self.base.radius_at(x, self.base.alpha)?;
        Ok(PredictionRegion::new(
            self.base.mean.predict(x)?,
            Self::combine(local, self.offset),
            self.base.region_metric,
        ))
    }

    /// Recomputes the offset for `alpha`; prefer [`Self::predict`] in loops.
    pub fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        if alpha == self.base.alpha {
            return self.predict(x);
        }
        let offset = self.offset_at(alpha, Execution::Sequential)?;
        let (local, _) = self.base.radius_at(x, alpha)?;
        Ok(PredictionRegion::new(
            self.base.mean.predict(x)?,
            Self::combine(local, offset),
            self.base.region_metric,
        ))
    }
}

/// Anything that maps a predictor to a prediction region.
pub trait RegionPredictor: Send + Sync {
    fn alpha(&self) -> f64;
    fn predictor_dim(&self) -> usize;
    fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion>;

    fn predict(&self, x: &[f64]) -> Result<PredictionRegion> {
        self.predict_at(x, self.alpha())
    }
}

impl RegionPredictor for HomoscedasticRegionModel {
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn predictor_dim(&self) -> usize {
        self.calibration.data.predictor_dim()
    }
    fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        HomoscedasticRegionModel::predict_at(self, x, alpha)
    }
}

impl RegionPredictor for HeteroscedasticRegionModel {
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn predictor_dim(&self) -> usize {
        self.calibration.data.predictor_dim()
    }
    fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        HeteroscedasticRegionModel::predict_at(self, x, alpha)
    }
}

impl RegionPredictor for TunedKnnModel {
    fn alpha(&self) -> f64 {
        self.base.alpha
    }
    fn predictor_dim(&self) -> usize {
        self.base.predictor_dim()
    }
    fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        self.base.predict_at(x, alpha)
    }
}

impl RegionPredictor for ConformalizedHeteroModel {
    fn alpha(&self) -> f64 {
        self.base.alpha
    }
    fn predictor_dim(&self) -> usize {
        self.base.predictor_dim()
    }
    fn predict(&self, x: &[f64]) -> Result<PredictionRegion> {
        ConformalizedHeteroModel::predict(self, x)
    }
    fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        ConformalizedHeteroModel::predict_at(self, x, alpha)
    }
}

/// Region predictor whose radius is given by a closure; used for oracle
/// regions and synthetic tests.
pub struct FnRegion<F> {
    pub alpha: f64,
    pub dim: usize,
    pub f: F,
}

impl<F> RegionPredictor for FnRegion<F>
where
    F: Fn(&[f64], f64) -> Result<PredictionRegion> + Send + Sync,
{
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn predictor_dim(&self) -> usize {
        self.dim
    }
    fn predict_at(&self, x: &[f64], alpha: f64) -> Result<PredictionRegion> {
        (self.f)(x, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frechet::KChoice;

    fn scalar(xs: &[f64], ys: &[f64]) -> LabeledDataset {
        let pts: Vec<_> = ys.iter().map(|y| ResponsePoint::euclidean(vec![*y])).collect();
        LabeledDataset::from_rows(xs.iter().map(|x| vec![*x]).collect(), &pts).unwrap()
    }

    fn zero_mean() -> MeanEstimator {
        MeanEstimator::Constant {
            point: ResponsePoint::euclidean(vec![0.0]),
        }
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.8, false, 0).unwrap(), 5.0);
        assert_eq!(empirical_quantile(&[5.0, 3.0, 1.0, 2.0, 4.0], 0.5, true, 9).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[7.0], 0.5, false, 0).unwrap(), 7.0);
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0], 0.99, false, 0).unwrap(), f64::INFINITY);
        assert_eq!(empirical_quantile(&[], 0.5, false, 0), Err(Error::EmptyValues));
        assert!(empirical_quantile(&[1.0], 1.0, false, 0).is_err());
    }

    #[test]
    fn conformal_rank_absorbs_rounding() {
        assert_eq!(conformal_rank(4, 0.8), 4);
        assert_eq!(conformal_rank(5, 0.8), 5);
        assert_eq!(conformal_rank(999, 1.0 - 0.2), 800);
        assert_eq!(conformal_rank(1, 0.01), 1);
    }

    #[test]
    fn contains_examples() {
        let c = ResponsePoint::euclidean(vec![1.0, 1.0]);
        let region = PredictionRegion::new(c.clone(), 0.0, MetricKind::EuclideanL2);
        assert!(region.contains(&c).unwrap());
        assert!(!region.contains(&ResponsePoint::euclidean(vec![1.0, 1.5])).unwrap());
        let region = PredictionRegion::new(c.clone(), 0.5, MetricKind::EuclideanSup);
        assert!(region.contains(&ResponsePoint::euclidean(vec![1.5, 0.5])).unwrap());
        let whole = PredictionRegion::new(c, f64::INFINITY, MetricKind::EuclideanL2);
        assert!(whole.contains(&ResponsePoint::euclidean(vec![1e300, -1e300])).unwrap());
        let grid = crate::metric::QuantileGrid::standard();
        let q = ResponsePoint::quantile(grid, vec![0.0; 101]).unwrap();
        assert!(matches!(whole.contains(&q), Err(Error::IncompatibleMetric { .. })));
    }

    #[test]
    fn homoscedastic_constant_response_radius_is_zero() {
        let xs: Vec<f64> = (0..20).map(f64::from).collect();
        let d = scalar(&xs, &[3.0; 20]);
        let (train, test) = crate::dataset::SplitConfig {
            train_fraction: 0.5,
            seed: 1,
        }
        .split(&d)
        .unwrap();
        let m = HomoscedasticRegionModel::fit(
            &train,
            test,
            0.2,
            &MeanSpec::Global,
            &RegionOptions::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert!(m.calibrated_radius() < 1e-9);
    }

    #[test]
    fn small_alpha_gives_whole_space() {
        let store = CalibrationStore::from_parts(scalar(&[0.0, 1.0], &[1.0, 2.0]), vec![1.0, 2.0]).unwrap();
        let m = HomoscedasticRegionModel::from_parts(zero_mean(), store, 0.01, MetricKind::EuclideanL2, false, 0)
            .unwrap();
        assert_eq!(m.calibrated_radius(), f64::INFINITY);
        let r = m.predict(&[0.3]).unwrap();
        assert!(r.contains(&ResponsePoint::euclidean(vec![1e12])).unwrap());
    }

    #[test]
    fn hetero_degenerate_cases() {
        let store = CalibrationStore::from_parts(scalar(&[4.0], &[2.5]), vec![2.5]).unwrap();
        let m = HeteroscedasticRegionModel::from_parts(zero_mean(), store, 1, 0.5, MetricKind::EuclideanL2, false, 0)
            .unwrap();
        assert_eq!(m.predict(&[-10.0]).unwrap().radius, 2.5);

        let xs: Vec<f64> = (0..30).map(f64::from).collect();
        let store = CalibrationStore::from_parts(scalar(&xs, &[1.5; 30]), vec![1.5; 30]).unwrap();
        for k in [3, 10, 30] {
            let m = HeteroscedasticRegionModel::from_parts(
                zero_mean(),
                store.clone(),
                k,
                0.3,
                MetricKind::EuclideanL2,
                false,
                0,
            )
            .unwrap();
            for x in [-3.0, 7.2, 40.0] {
                assert_eq!(m.predict(&[x]).unwrap().radius, 1.5);
            }
        }
        assert!(matches!(
            HeteroscedasticRegionModel::from_parts(zero_mean(), store, 31, 0.3, MetricKind::EuclideanL2, false, 0),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn equidistant_query_is_deterministic() {
        let xs = [-1.0, 1.0, -1.0, 1.0, -2.0, 2.0];
        let store = CalibrationStore::from_parts(scalar(&xs, &[0.0; 6]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let m = HeteroscedasticRegionModel::from_parts(zero_mean(), store, 3, 0.5, MetricKind::EuclideanL2, false, 11)
            .unwrap();
        let a = m.predict(&[0.0]).unwrap();
        for _ in 0..5 {
            assert_eq!(m.predict(&[0.0]).unwrap(), a);
        }
    }

    #[test]
    fn tuning_edge_cases() {
        let xs: Vec<f64> = (0..40).map(f64::from).collect();
        let store = CalibrationStore::from_parts(scalar(&xs, &xs), vec![0.0; 40]).unwrap();
        let mean = MeanEstimator::Knn(
            KnnFrechetModel::new(scalar(&xs, &xs), 1, MetricKind::EuclideanL2, 0).unwrap(),
        );
        let m = HeteroscedasticRegionModel::from_parts(mean, store, 5, 0.2, MetricKind::EuclideanL2, false, 0).unwrap();
        let t = tune_k_marginal(&m, &[7], TuneData::CalibrationLeaveOneOut, 0.2, Execution::Sequential).unwrap();
        assert_eq!(t.best_k, 7);
        let tune = scalar(&[0.5, 10.0, 20.0], &[0.0, 10.0, 20.0]);
        let t = tune_k_marginal(&m, &[20, 5, 10], TuneData::HeldOut(&tune), 0.2, Execution::Sequential).unwrap();
        assert_eq!(t.coverage, vec![1.0, 1.0, 1.0]);
        assert_eq!(t.best_k, 5);
        assert_eq!(
            tune_k_marginal(&m, &[], TuneData::CalibrationLeaveOneOut, 0.2, Execution::Sequential),
            Err(Error::KGridEmpty)
        );
    }

    #[test]
    fn conformal_with_zero_local_radius_is_homoscedastic() {
        // Split-2 residuals are all zero, so r̃ ≡ 0 and the offset is the
        // plain conformal quantile of the split-3 residuals.
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let base_store = CalibrationStore::from_parts(scalar(&xs, &[0.0; 10]), vec![0.0; 10]).unwrap();
        let base =
            HeteroscedasticRegionModel::from_parts(zero_mean(), base_store, 4, 0.2, MetricKind::EuclideanL2, false, 0)
                .unwrap();
        let r3: Vec<f64> = (1..=19).map(f64::from).collect();
        let x3: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let scoring = CalibrationStore::from_parts(scalar(&x3, &r3), r3.clone()).unwrap();
        let m = ConformalizedHeteroModel::from_parts(base, scoring, Execution::Sequential).unwrap();
        assert_eq!(m.offset(), empirical_quantile(&r3, 0.8, false, 0).unwrap());
        assert_eq!(m.predict(&[3.0]).unwrap().radius, 16.0);
    }

    #[test]
    fn randomized_ties_split_the_boundary() {
        // Every residual equals 1; responses are distinct points on the unit
        // sup-sphere, so every comparison is a tie.
        let n = 400;
        let on_sphere = |t: f64| ResponsePoint::euclidean(vec![1.0, t]);
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let ys: Vec<_> = (0..n).map(|i| on_sphere(i as f64 / n as f64)).collect();
        let data = LabeledDataset::from_rows(xs, &ys).unwrap();
        let store = CalibrationStore::from_parts(data, vec![1.0; n]).unwrap();
        let center = MeanEstimator::Constant {
            point: ResponsePoint::euclidean(vec![0.0, 0.0]),
        };
        let m = HomoscedasticRegionModel::from_parts(center, store, 0.5, MetricKind::EuclideanSup, true, 3).unwrap();
        let region = m.predict(&[0.0]).unwrap();
        assert_eq!(region.radius, 1.0);
        assert!(region.tie_break.is_some());
        let admitted = (0..2000)
            .filter(|i| region.contains(&on_sphere(-0.5 - *i as f64 / 5000.0)).unwrap())
            .count();
        assert!((850..1150).contains(&admitted), "{admitted}");
        let plain = PredictionRegion {
            tie_break: None,
            ..region
        };
        assert!(plain.contains(&on_sphere(-0.9)).unwrap());
    }

    #[test]
    fn mean_spec_serde_shape() {
        let s = MeanSpec::Knn { k: KChoice::Fixed(3) };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"type":"knn","k":{"fixed":3}}"#);
    }
}

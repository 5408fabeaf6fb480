//! Conditional Fréchet mean estimators.
//!
//! Under the Euclidean L² metric the Fréchet mean of a weighted sample is the
//! weighted average. Under the 2-Wasserstein metric on a quantile grid the
//! squared distance is a positively weighted sum of squared coordinate
//! differences, so the weighted Fréchet mean is the pointwise weighted average
//! of quantile values projected onto nondecreasing vectors (isotonic
//! regression with the quadrature weights). With nonnegative weights the
//! projection is a no-op.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Responses};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::isotonic::isotonic_nondecreasing;
use crate::metric::{distance, MetricKind, PointRef, ResponsePoint};
use crate::neighbors::nearest;
use crate::rng::{hash_reals, splitmix64};

/// Condition number above which the sample covariance is ridge-regularised.
pub const MAX_CONDITION: f64 = 1e12;
/// Ridge factor applied to `trace(Σ)/p`.
pub const RIDGE_FACTOR: f64 = 1e-8;

pub(crate) fn check_fit_metric(metric: MetricKind, sample: PointRef<'_>) -> Result<()> {
    metric.check(sample)?;
    match metric {
        MetricKind::EuclideanL2 | MetricKind::Wasserstein2 => Ok(()),
        other => Err(Error::UnsupportedFitMetric(other.name())),
    }
}

/// Content hash of row `i`, used to order exact distance ties independently
/// of row order.
pub(crate) fn row_hash(data: &LabeledDataset, i: usize) -> u64 {
    hash_reals(hash_reals(0, data.x(i)), data.y(i).values())
}

pub(crate) fn row_hashes(data: &LabeledDataset) -> Vec<u64> {
    (0..data.len()).map(|i| row_hash(data, i)).collect()
}

/// Weighted Fréchet mean of `responses[idx]` under `metric`.
pub(crate) fn weighted_mean(
    responses: &Responses,
    weights: &[f64],
    metric: MetricKind,
) -> Result<Vec<f64>> {
    let d = responses.dim();
    let n = responses.len();
    let total: f64 = weights.iter().sum();
    if total.abs() < 1e-12 * n as f64 {
        return Err(Error::WeightsSumToZero);
    }
    let raw = responses.raw();
    let mut acc = vec![0.0; d];
    for (i, w) in weights.iter().enumerate() {
        for (a, v) in acc.iter_mut().zip(&raw[i * d..(i + 1) * d]) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    if metric == MetricKind::Wasserstein2 {
        let grid = responses.grid().expect("wasserstein metric on quantile responses");
        if total < 0.0 {
            // Objective is unbounded below.
            return Err(Error::WeightsSumToZero);
        }
        if acc.windows(2).any(|w| w[1] < w[0]) {
            acc = isotonic_nondecreasing(&acc, grid.weights());
        }
    }
    Ok(acc)
}

fn unweighted_mean(responses: &Responses, idx: &[usize]) -> Vec<f64> {
    let d = responses.dim();
    let raw = responses.raw();
    let mut acc = vec![0.0; d];
    for &i in idx {
        for (a, v) in acc.iter_mut().zip(&raw[i * d..(i + 1) * d]) {
            *a += v;
        }
    }
    let k = idx.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    acc
}

/// Local Fréchet mean over the `k` nearest training predictors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "KnnFrechetFields")]
pub struct KnnFrechetModel {
    training: LabeledDataset,
    k: usize,
    fit_metric: MetricKind,
    seed: u64,
    #[serde(skip)]
    hashes: Vec<u64>,
}

#[derive(Deserialize)]
struct KnnFrechetFields {
    training: LabeledDataset,
    k: usize,
    fit_metric: MetricKind,
    seed: u64,
}

impl TryFrom<KnnFrechetFields> for KnnFrechetModel {
    type Error = Error;
    fn try_from(f: KnnFrechetFields) -> Result<Self> {
        KnnFrechetModel::new(f.training, f.k, f.fit_metric, f.seed)
    }
}

impl KnnFrechetModel {
    pub fn new(training: LabeledDataset, k: usize, fit_metric: MetricKind, seed: u64) -> Result<Self> {
        if training.is_empty() {
            return Err(Error::EmptyModel);
        }
        check_fit_metric(fit_metric, training.y(0))?;
        if k == 0 || k > training.len() {
            return Err(Error::KTooLarge {
                k,
                available: training.len(),
            });
        }
        let hashes = row_hashes(&training);
        Ok(Self {
            training,
            k,
            fit_metric,
            seed,
            hashes,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fit_metric(&self) -> MetricKind {
        self.fit_metric
    }

    pub fn training(&self) -> &LabeledDataset {
        &self.training
    }

    /// Indices of the `k` nearest training rows, nearest first.
    pub fn neighbors(&self, x: &[f64]) -> Result<Vec<usize>> {
        let p = self.training.predictor_dim();
        if x.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: x.len(),
            });
        }
        Ok(nearest(self.training.predictors(), p, x, self.k, None, |i| {
            splitmix64(self.seed ^ self.hashes[i])
        }))
    }

    pub fn predict(&self, x: &[f64]) -> Result<ResponsePoint> {
        let idx = self.neighbors(x)?;
        let responses = self.training.responses();
        Ok(responses.make_point(unweighted_mean(responses, &idx)))
    }
}

/// Global Fréchet regression with weights
/// `ωᵢ(x) = 1 + (Xᵢ − X̄)ᵀ Σ̃⁻¹ (x − X̄)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalFrechetModel {
    training: LabeledDataset,
    mean_x: Vec<f64>,
    /// Row-major `p × p`.
    cov_inv: Vec<f64>,
    fit_metric: MetricKind,
}

impl GlobalFrechetModel {
    /// Stores the rows in a content-derived order, so `training()` need not
    /// match the input order.
    pub fn fit(data: LabeledDataset, fit_metric: MetricKind) -> Result<Self> {
        let n = data.len();
        let p = data.predictor_dim();
        if n < p + 2 {
            return Err(Error::TooFewSamples {
                needed: p + 2,
                have: n,
            });
        }
        check_fit_metric(fit_metric, data.y(0))?;
        // Sums run in a row order that does not depend on the input order.
        let hashes = row_hashes(&data);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| hashes[i]);
        let data = data.subset(&order);
        let mut mean_x = vec![0.0; p];
        for i in 0..n {
            for (m, v) in mean_x.iter_mut().zip(data.x(i)) {
                *m += v;
            }
        }
        mean_x.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let c = DVector::from_iterator(p, data.x(i).iter().zip(&mean_x).map(|(a, b)| a - b));
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        let cov_inv = regularized_inverse(&cov);
        Ok(Self {
            training: data,
            mean_x,
            cov_inv: cov_inv.transpose().as_slice().to_vec(),
            fit_metric,
        })
    }

    pub fn mean_x(&self) -> &[f64] {
        &self.mean_x
    }

    pub fn cov_inv(&self) -> &[f64] {
        &self.cov_inv
    }

    pub fn training(&self) -> &LabeledDataset {
        &self.training
    }

    /// `ωᵢ(x)` for every row of [`training`](Self::training).
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.mean_x.len();
        if x.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: x.len(),
            });
        }
        let dx: Vec<f64> = x.iter().zip(&self.mean_x).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = (0..p)
            .map(|r| (0..p).map(|c| self.cov_inv[r * p + c] * dx[c]).sum())
            .collect();
        Ok((0..self.training.len())
            .map(|i| {
                1.0 + self
                    .training
                    .x(i)
                    .iter()
                    .zip(&self.mean_x)
                    .zip(&v)
                    .map(|((xi, m), vi)| (xi - m) * vi)
                    .sum::<f64>()
            })
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<ResponsePoint> {
        let w = self.weights(x)?;
        let responses = self.training.responses();
        Ok(responses.make_point(weighted_mean(responses, &w, self.fit_metric)?))
    }
}

/// Inverse of a symmetric PSD matrix; ridge-regularised when its condition
/// number exceeds [`MAX_CONDITION`].
fn regularized_inverse(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let p = cov.nrows();
    let eig = cov.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let mut values = eig.eigenvalues.clone();
    if max <= 0.0 {
        return DMatrix::zeros(p, p);
    }
    if min <= 0.0 || max / min > MAX_CONDITION {
        let ridge = RIDGE_FACTOR * cov.trace() / p as f64;
        values.iter_mut().for_each(|v| *v = v.max(0.0) + ridge);
    }
    let inv_diag = DMatrix::from_diagonal(&values.map(|v| 1.0 / v));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    // Symmetrise away round-off.
    (&inv + inv.transpose()) * 0.5
}

/// How the neighbourhood size of a kNN mean is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KChoice {
    Fixed(usize),
    /// Leave-one-out selection over the grid.
    Auto(Vec<usize>),
}

/// Recipe for the conditional mean estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeanSpec {
    Knn { k: KChoice },
    Global,
    /// Ignores the data and predicts a fixed point.
    Constant { point: ResponsePoint },
}

impl MeanSpec {
    pub fn knn_auto() -> Self {
        MeanSpec::Knn {
            k: KChoice::Auto(default_mean_k_grid()),
        }
    }
}

pub fn default_mean_k_grid() -> Vec<usize> {
    vec![1, 2, 3, 5, 8, 12, 20, 30, 50, 75, 100, 150]
}

/// A fitted conditional mean estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeanEstimator {
    Knn(KnnFrechetModel),
    Global(GlobalFrechetModel),
    Constant { point: ResponsePoint },
}

impl MeanEstimator {
    pub fn fit(
        spec: &MeanSpec,
        train: &LabeledDataset,
        fit_metric: MetricKind,
        seed: u64,
        exec: Execution,
    ) -> Result<Self> {
        match spec {
            MeanSpec::Knn { k: KChoice::Fixed(k) } => Ok(MeanEstimator::Knn(KnnFrechetModel::new(
                train.clone(),
                *k,
                fit_metric,
                seed,
            )?)),
            MeanSpec::Knn { k: KChoice::Auto(grid) } => {
                let feasible: Vec<usize> = grid
                    .iter()
                    .copied()
                    .filter(|&k| k >= 1 && k < train.len())
                    .collect();
                let k = if feasible.is_empty() {
                    if grid.is_empty() {
                        return Err(Error::KGridEmpty);
                    }
                    1
                } else {
                    loo_select_k(train, fit_metric, &feasible, seed, exec)?.best_k
                };
                Ok(MeanEstimator::Knn(KnnFrechetModel::new(
                    train.clone(),
                    k,
                    fit_metric,
                    seed,
                )?))
            }
            MeanSpec::Global => Ok(MeanEstimator::Global(GlobalFrechetModel::fit(
                train.clone(),
                fit_metric,
            )?)),
            MeanSpec::Constant { point } => {
                fit_metric.check(point.as_ref())?;
                Ok(MeanEstimator::Constant {
                    point: point.clone(),
                })
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<ResponsePoint> {
        match self {
            MeanEstimator::Knn(m) => m.predict(x),
            MeanEstimator::Global(m) => m.predict(x),
            MeanEstimator::Constant { point } => Ok(point.clone()),
        }
    }
}

/// Leave-one-out risk table for kNN mean estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooSelection {
    pub k_grid: Vec<usize>,
    /// `errors[i * k_grid.len() + j]` is `d₁(Yᵢ, m̃₋ᵢ(Xᵢ))` for `k_grid[j]`.
    pub errors: Vec<f64>,
    /// Per-point minimiser of the leave-one-out error.
    pub per_point_best: Vec<usize>,
    /// Mean squared leave-one-out error per grid value.
    pub risk: Vec<f64>,
    /// Grid value with the smallest risk (smallest k on ties).
    pub best_k: usize,
}

impl LooSelection {
    pub fn error(&self, i: usize, k_index: usize) -> f64 {
        self.errors[i * self.k_grid.len() + k_index]
    }
}

pub(crate) fn normalize_k_grid(k_grid: &[usize], available: usize) -> Result<Vec<usize>> {
    let mut grid = k_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    match (grid.first(), grid.last()) {
        (None, _) => Err(Error::KGridEmpty),
        (Some(0), _) => Err(Error::InvalidParameter("k must be positive".into())),
        (_, Some(&k)) if k > available => Err(Error::KTooLarge { k, available }),
        _ => Ok(grid),
    }
}

/// For every training point and every candidate k, predicts `Yᵢ` from its
/// k nearest other points and records `d₁(Yᵢ, m̃₋ᵢ(Xᵢ))`.
pub fn loo_select_k(
    data: &LabeledDataset,
    fit_metric: MetricKind,
    k_grid: &[usize],
    seed: u64,
    exec: Execution,
) -> Result<LooSelection> {
    let n = data.len();
    check_fit_metric(fit_metric, data.y(0))?;
    let grid = normalize_k_grid(k_grid, n.saturating_sub(1))?;
    let kmax = *grid.last().expect("nonempty");
    let hashes = row_hashes(data);
    let p = data.predictor_dim();
    let responses = data.responses();
    let dim = responses.dim();
    let rows = exec.try_map(n, |i| {
        let nb = nearest(data.predictors(), p, data.x(i), kmax, Some(i), |j| {
            splitmix64(seed ^ hashes[j])
        });
        let mut acc = vec![0.0; dim];
        let mut mean = vec![0.0; dim];
        let mut errs = Vec::with_capacity(grid.len());
        let mut used = 0;
        for &k in &grid {
            for &j in &nb[used..k] {
                for (a, v) in acc.iter_mut().zip(responses.get(j).values()) {
                    *a += v;
                }
            }
            used = k;
            for (m, a) in mean.iter_mut().zip(&acc) {
                *m = a / k as f64;
            }
            let center = match responses.get(i) {
                PointRef::Euclidean(_) => PointRef::Euclidean(&mean),
                PointRef::Quantile(g, _) => PointRef::Quantile(g, &mean),
            };
            errs.push(distance(fit_metric, responses.get(i), center)?);
        }
        Ok(errs)
    })?;
    let g = grid.len();
    let mut risk = vec![0.0; g];
    let mut per_point_best = Vec::with_capacity(n);
    for errs in &rows {
        let mut best = 0;
        for (j, e) in errs.iter().enumerate() {
            risk[j] += e * e / n as f64;
            if *e < errs[best] {
                best = j;
            }
        }
        per_point_best.push(grid[best]);
    }
    let best = (0..g).fold(0, |b, j| if risk[j] < risk[b] { j } else { b });
    Ok(LooSelection {
        best_k: grid[best],
        k_grid: grid,
        errors: rows.into_iter().flatten().collect(),
        per_point_best,
        risk,
    })
}

//! Response points and the distances used for fitting (d₁) and for region
//! geometry (d₂).
//!
//! Two kinds of response are supported: plain vectors in ℝᵐ and
//! one-dimensional distributions represented by their quantile function
//! sampled on a fixed grid of probability levels. The 2-Wasserstein distance
//! between two distributions is the L² distance between their quantile
//! functions; it is evaluated with the trapezoid rule on the shared grid, with
//! the function held constant from 0 up to the first level and from the last
//! level up to 1.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of levels in [`QuantileGrid::standard`].
pub const STANDARD_GRID_LEN: usize = 101;

/// Strictly increasing probability levels in (0, 1) plus their quadrature
/// weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileGrid {
    levels: Vec<f64>,
    weights: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if let Some(v) = grid_violations(&levels).into_iter().next() {
            return Err(Error::InvalidPoint(v.to_string()));
        }
        let weights = quadrature_weights(&levels);
        Ok(Self { levels, weights })
    }

    /// 101 equispaced levels 0.005, 0.0149, …, 0.995.
    ///
    /// Levels are computed as `(50 + 99 i) / 10000`, a correctly rounded
    /// quotient, so they parse back bit-identically from their shortest
    /// decimal form.
    pub fn standard() -> Arc<Self> {
        static GRID: OnceLock<Arc<QuantileGrid>> = OnceLock::new();
        GRID.get_or_init(|| {
            let levels = (0..STANDARD_GRID_LEN)
                .map(|i| (50 + 99 * i) as f64 / 10_000.0)
                .collect();
            Arc::new(QuantileGrid::new(levels).expect("standard grid is valid"))
        })
        .clone()
    }

    /// `g` cell midpoints `(2i + 1) / (2g)`.
    pub fn midpoints(g: usize) -> Result<Self> {
        if g == 0 {
            return Err(Error::InvalidParameter("grid needs at least one level".into()));
        }
        Self::new((0..g).map(|i| (2 * i + 1) as f64 / (2 * g) as f64).collect())
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Trapezoid weights including the constant end extensions; they sum to 1.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl PartialEq for QuantileGrid {
    fn eq(&self, other: &Self) -> bool {
        self.levels == other.levels
    }
}

impl TryFrom<Vec<f64>> for QuantileGrid {
    type Error = Error;
    fn try_from(levels: Vec<f64>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<QuantileGrid> for Vec<f64> {
    fn from(grid: QuantileGrid) -> Self {
        grid.levels
    }
}

fn quadrature_weights(levels: &[f64]) -> Vec<f64> {
    let g = levels.len();
    if g == 1 {
        return vec![1.0];
    }
    let mut w = vec![0.0; g];
    for i in 0..g - 1 {
        let half = 0.5 * (levels[i + 1] - levels[i]);
        w[i] += half;
        w[i + 1] += half;
    }
    w[0] += levels[0];
    w[g - 1] += 1.0 - levels[g - 1];
    w
}

/// A point in the response space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponsePoint {
    Euclidean { values: Vec<f64> },
    Quantile { grid: Arc<QuantileGrid>, values: Vec<f64> },
}

impl ResponsePoint {
    pub fn euclidean(values: Vec<f64>) -> Self {
        ResponsePoint::Euclidean { values }
    }

    /// Builds a quantile-function point, rejecting non-monotone or
    /// mis-sized value vectors.
    pub fn quantile(grid: Arc<QuantileGrid>, values: Vec<f64>) -> Result<Self> {
        let p = ResponsePoint::Quantile { grid, values };
        match validate_point(&p) {
            Ok(()) => Ok(p),
            Err(v) => Err(v[0].clone().into()),
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            ResponsePoint::Euclidean { values } | ResponsePoint::Quantile { values, .. } => values,
        }
    }

    pub fn as_ref(&self) -> PointRef<'_> {
        match self {
            ResponsePoint::Euclidean { values } => PointRef::Euclidean(values),
            ResponsePoint::Quantile { grid, values } => PointRef::Quantile(grid, values),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        self.as_ref().kind_name()
    }
}

/// Borrowed view of a response, used on hot paths to avoid allocation.
#[derive(Debug, Clone, Copy)]
pub enum PointRef<'a> {
    Euclidean(&'a [f64]),
    Quantile(&'a QuantileGrid, &'a [f64]),
}

impl<'a> PointRef<'a> {
    pub fn values(&self) -> &'a [f64] {
        match *self {
            PointRef::Euclidean(v) | PointRef::Quantile(_, v) => v,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PointRef::Euclidean(_) => "euclidean",
            PointRef::Quantile(..) => "quantile",
        }
    }

    pub fn to_owned_point(&self, grid: Option<&Arc<QuantileGrid>>) -> ResponsePoint {
        match *self {
            PointRef::Euclidean(v) => ResponsePoint::euclidean(v.to_vec()),
            PointRef::Quantile(g, v) => ResponsePoint::Quantile {
                grid: grid.cloned().unwrap_or_else(|| Arc::new(g.clone())),
                values: v.to_vec(),
            },
        }
    }
}

/// Distance on the response space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    EuclideanL2,
    EuclideanSup,
    Wasserstein2,
    QuantileSup,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::EuclideanL2,
        MetricKind::EuclideanSup,
        MetricKind::Wasserstein2,
        MetricKind::QuantileSup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::EuclideanL2 => "euclidean-l2",
            MetricKind::EuclideanSup => "euclidean-sup",
            MetricKind::Wasserstein2 => "wasserstein2",
            MetricKind::QuantileSup => "quantile-sup",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn applies_to_quantiles(self) -> bool {
        matches!(self, MetricKind::Wasserstein2 | MetricKind::QuantileSup)
    }

    /// Default fitting metric for a response kind.
    pub fn default_for(point: PointRef<'_>) -> Self {
        match point {
            PointRef::Euclidean(_) => MetricKind::EuclideanL2,
            PointRef::Quantile(..) => MetricKind::Wasserstein2,
        }
    }

    pub fn check(self, point: PointRef<'_>) -> Result<()> {
        let ok = match point {
            PointRef::Euclidean(_) => !self.applies_to_quantiles(),
            PointRef::Quantile(..) => self.applies_to_quantiles(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::IncompatibleMetric {
                metric: self.name(),
                point: point.kind_name(),
            })
        }
    }

    pub fn distance(self, a: &ResponsePoint, b: &ResponsePoint) -> Result<f64> {
        distance(self, a.as_ref(), b.as_ref())
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `d(a, b)` under `kind`.
pub fn distance(kind: MetricKind, a: PointRef<'_>, b: PointRef<'_>) -> Result<f64> {
    kind.check(a)?;
    kind.check(b)?;
    let (x, y) = (a.values(), b.values());
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if let (PointRef::Quantile(ga, _), PointRef::Quantile(gb, _)) = (a, b) {
        if !std::ptr::eq(ga, gb) && ga != gb {
            return Err(Error::GridMismatch);
        }
    }
    Ok(match (kind, a) {
        (MetricKind::EuclideanL2, _) => sum_sq(x, y).sqrt(),
        (MetricKind::EuclideanSup | MetricKind::QuantileSup, _) => max_abs(x, y),
        (MetricKind::Wasserstein2, PointRef::Quantile(grid, _)) => {
            weighted_sum_sq(grid.weights(), x, y).sqrt()
        }
        _ => unreachable!("metric compatibility checked above"),
    })
}

#[inline]
fn sum_sq(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
fn weighted_sum_sq(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    w.iter()
        .zip(x.iter().zip(y))
        .map(|(w, (a, b))| w * (a - b) * (a - b))
        .sum()
}

#[inline]
fn max_abs(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// A single invariant violation reported by [`validate_point`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    NonFinite { index: usize },
    NonMonotoneQuantile { index: usize },
    GridNotStrictlyIncreasing { index: usize },
    GridOutOfRange { index: usize },
    LengthMismatch { grid: usize, values: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "no values"),
            Violation::NonFinite { index } => write!(f, "non-finite value at index {index}"),
            Violation::NonMonotoneQuantile { index } => {
                write!(f, "quantile values decrease at index {index}")
            }
            Violation::GridNotStrictlyIncreasing { index } => {
                write!(f, "grid not strictly increasing at index {index}")
            }
            Violation::GridOutOfRange { index } => {
                write!(f, "grid level at index {index} is outside (0, 1)")
            }
            Violation::LengthMismatch { grid, values } => {
                write!(f, "{values} values for a grid of {grid} levels")
            }
        }
    }
}

impl From<Violation> for Error {
    fn from(v: Violation) -> Self {
        match v {
            Violation::NonMonotoneQuantile { index } => Error::NonMonotoneQuantile { index },
            Violation::LengthMismatch { grid, values } => Error::DimensionMismatch {
                expected: grid,
                found: values,
            },
            other => Error::InvalidPoint(other.to_string()),
        }
    }
}

fn grid_violations(levels: &[f64]) -> Vec<Violation> {
    let mut out = Vec::new();
    if levels.is_empty() {
        out.push(Violation::Empty);
    }
    for (i, &t) in levels.iter().enumerate() {
        if !t.is_finite() {
            out.push(Violation::NonFinite { index: i });
        } else if t <= 0.0 || t >= 1.0 {
            out.push(Violation::GridOutOfRange { index: i });
        }
        if i > 0 && levels[i - 1].is_finite() && t.is_finite() && t <= levels[i - 1] {
            out.push(Violation::GridNotStrictlyIncreasing { index: i });
        }
    }
    out
}

fn value_violations(values: &[f64], monotone: bool) -> Vec<Violation> {
    let mut out = Vec::new();
    if values.is_empty() {
        out.push(Violation::Empty);
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            out.push(Violation::NonFinite { index: i });
        }
    }
    if monotone {
        for i in 1..values.len() {
            if values[i] < values[i - 1] {
                out.push(Violation::NonMonotoneQuantile { index: i });
            }
        }
    }
    out
}

/// Checks raw grid and value arrays of a would-be quantile point.
pub fn validate_quantile(levels: &[f64], values: &[f64]) -> Vec<Violation> {
    let mut out = grid_violations(levels);
    if levels.len() != values.len() {
        out.push(Violation::LengthMismatch {
            grid: levels.len(),
            values: values.len(),
        });
    }
    out.extend(value_violations(values, true));
    out
}

/// Returns every invariant violation of `p`; `Ok(())` iff `p` is valid.
pub fn validate_point(p: &ResponsePoint) -> std::result::Result<(), Vec<Violation>> {
    let v = match p {
        ResponsePoint::Euclidean { values } => value_violations(values, false),
        ResponsePoint::Quantile { grid, values } => validate_quantile(grid.levels(), values),
    };
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{validate_point, PointRef, QuantileGrid, ResponsePoint};
use crate::rng::{self, purpose};

/// Responses of a dataset stored row-major in one buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Responses {
    Euclidean { dim: usize, values: Vec<f64> },
    Quantile { grid: Arc<QuantileGrid>, values: Vec<f64> },
}

impl Responses {
    pub fn empty_like(point: PointRef<'_>) -> Self {
        match point {
            PointRef::Euclidean(v) => Responses::Euclidean {
                dim: v.len(),
                values: Vec::new(),
            },
            PointRef::Quantile(g, _) => Responses::Quantile {
                grid: Arc::new(g.clone()),
                values: Vec::new(),
            },
        }
    }

    /// Values per response.
    pub fn dim(&self) -> usize {
        match self {
            Responses::Euclidean { dim, .. } => *dim,
            Responses::Quantile { grid, .. } => grid.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.raw().len().checked_div(self.dim()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn raw(&self) -> &[f64] {
        match self {
            Responses::Euclidean { values, .. } | Responses::Quantile { values, .. } => values,
        }
    }

    pub fn grid(&self) -> Option<&Arc<QuantileGrid>> {
        match self {
            Responses::Quantile { grid, .. } => Some(grid),
            Responses::Euclidean { .. } => None,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> PointRef<'_> {
        let d = self.dim();
        match self {
            Responses::Euclidean { values, .. } => PointRef::Euclidean(&values[i * d..(i + 1) * d]),
            Responses::Quantile { grid, values } => {
                PointRef::Quantile(grid, &values[i * d..(i + 1) * d])
            }
        }
    }

    pub fn point(&self, i: usize) -> ResponsePoint {
        self.get(i).to_owned_point(self.grid())
    }

    /// Wraps a buffer of the same layout as `self` into a point.
    pub fn make_point(&self, values: Vec<f64>) -> ResponsePoint {
        match self {
            Responses::Euclidean { .. } => ResponsePoint::euclidean(values),
            Responses::Quantile { grid, .. } => ResponsePoint::Quantile {
                grid: grid.clone(),
                values,
            },
        }
    }

    /// Appends a point with the same layout.
    pub fn push(&mut self, p: &ResponsePoint) -> Result<()> {
        let d = self.dim();
        match (self, p) {
            (Responses::Euclidean { values, .. }, ResponsePoint::Euclidean { values: v })
                if v.len() == d =>
            {
                values.extend_from_slice(v);
                Ok(())
            }
            (Responses::Quantile { grid, values }, ResponsePoint::Quantile { grid: g, values: v })
                if **grid == **g =>
            {
                values.extend_from_slice(v);
                Ok(())
            }
            (r, p) => {
                if r.kind_name() == p.kind_name() {
                    Err(Error::DimensionMismatch {
                        expected: d,
                        found: p.values().len(),
                    })
                } else {
                    Err(Error::InvalidPoint(format!(
                        "{} response in a {} dataset",
                        p.kind_name(),
                        r.kind_name()
                    )))
                }
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Responses::Euclidean { .. } => "euclidean",
            Responses::Quantile { .. } => "quantile",
        }
    }

    fn select(&self, idx: &[usize]) -> Self {
        let d = self.dim();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&self.raw()[i * d..(i + 1) * d]);
        }
        match self {
            Responses::Euclidean { dim, .. } => Responses::Euclidean {
                dim: *dim,
                values: out,
            },
            Responses::Quantile { grid, .. } => Responses::Quantile {
                grid: grid.clone(),
                values: out,
            },
        }
    }
}

/// Pairs `(Xᵢ, Yᵢ)` with `Xᵢ ∈ ℝᵖ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset")]
pub struct LabeledDataset {
    predictor_dim: usize,
    predictors: Vec<f64>,
    responses: Responses,
}

#[derive(Deserialize)]
struct RawDataset {
    predictor_dim: usize,
    predictors: Vec<f64>,
    responses: Responses,
}

impl TryFrom<RawDataset> for LabeledDataset {
    type Error = Error;
    fn try_from(r: RawDataset) -> Result<Self> {
        LabeledDataset::new(r.predictor_dim, r.predictors, r.responses)
    }
}

impl LabeledDataset {
    /// Validates shapes, predictor finiteness and every response.
    pub fn new(predictor_dim: usize, predictors: Vec<f64>, responses: Responses) -> Result<Self> {
        if predictor_dim == 0 {
            return Err(Error::InvalidParameter("predictor dimension must be ≥ 1".into()));
        }
        if responses.dim() == 0 || !responses.raw().len().is_multiple_of(responses.dim()) {
            return Err(Error::InvalidParameter("ragged response buffer".into()));
        }
        let n = responses.len();
        if n == 0 {
            return Err(Error::TooFewSamples { needed: 1, have: 0 });
        }
        if predictors.len() != n * predictor_dim {
            return Err(Error::DimensionMismatch {
                expected: n * predictor_dim,
                found: predictors.len(),
            });
        }
        if let Some(i) = predictors.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite predictor in row {}",
                i / predictor_dim
            )));
        }
        for i in 0..n {
            if let Err(v) = validate_point(&responses.point(i)) {
                return Err(Error::InvalidPoint(format!("row {i}: {}", v[0])));
            }
        }
        Ok(Self {
            predictor_dim,
            predictors,
            responses,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, points: &[ResponsePoint]) -> Result<Self> {
        let first = points.first().ok_or(Error::TooFewSamples { needed: 1, have: 0 })?;
        if rows.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                found: rows.len(),
            });
        }
        let p = rows.first().map_or(0, Vec::len);
        let mut predictors = Vec::with_capacity(rows.len() * p);
        for r in &rows {
            if r.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: r.len(),
                });
            }
            predictors.extend_from_slice(r);
        }
        let mut responses = Responses::empty_like(first.as_ref());
        if let (Responses::Quantile { grid, .. }, ResponsePoint::Quantile { grid: g, .. }) =
            (&mut responses, first)
        {
            *grid = g.clone();
        }
        for pt in points {
            responses.push(pt)?;
        }
        Self::new(p, predictors, responses)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn predictor_dim(&self) -> usize {
        self.predictor_dim
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.predictors[i * self.predictor_dim..(i + 1) * self.predictor_dim]
    }

    #[inline]
    pub fn y(&self, i: usize) -> PointRef<'_> {
        self.responses.get(i)
    }

    pub fn predictors(&self) -> &[f64] {
        &self.predictors
    }

    pub fn responses(&self) -> &Responses {
        &self.responses
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let p = self.predictor_dim;
        let mut predictors = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            predictors.extend_from_slice(self.x(i));
        }
        Self {
            predictor_dim: p,
            predictors,
            responses: self.responses.select(idx),
        }
    }

    /// Random disjoint parts with sizes `round(fᵢ·n)`; the last part takes
    /// whatever remains. Fractions must be positive and sum to at most 1.
    pub fn split_fractions(&self, fractions: &[f64], seed: u64) -> Result<Vec<Self>> {
        let n = self.len();
        let total: f64 = fractions.iter().sum();
        if fractions.is_empty()
            || fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0))
            || total > 1.0 + 1e-12
        {
            return Err(Error::InvalidParameter(format!(
                "split fractions {fractions:?} must lie in (0,1) and sum to at most 1"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, &[purpose::SPLIT, n as u64]));
        let mut parts = Vec::with_capacity(fractions.len() + 1);
        let mut start = 0;
        for f in fractions {
            let size = ((f * n as f64).round() as usize).min(n - start);
            parts.push(&idx[start..start + size]);
            start += size;
        }
        if total < 1.0 - 1e-12 {
            parts.push(&idx[start..]);
        } else if let Some(last) = parts.last_mut() {
            // Fractions summing to one: the last part absorbs rounding slack.
            let begin = start - last.len();
            *last = &idx[begin..];
        }
        if let Some(i) = parts.iter().position(|p| p.is_empty()) {
            return Err(Error::InvalidParameter(format!(
                "split part {i} is empty for n = {n} and fractions {fractions:?}"
            )));
        }
        Ok(parts.into_iter().map(|p| self.subset(p)).collect())
    }
}

/// Two-way split into a fitting part and a calibration part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn split(&self, data: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
        let mut parts = data.split_fractions(&[self.train_fraction], self.seed)?;
        let test = parts.pop().expect("two parts");
        let train = parts.pop().expect("two parts");
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> LabeledDataset {
        let rows = (0..n).map(|i| vec![i as f64]).collect();
        let pts: Vec<_> = (0..n).map(|i| ResponsePoint::euclidean(vec![2.0 * i as f64])).collect();
        LabeledDataset::from_rows(rows, &pts).unwrap()
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let d = line(101);
        let (a, b) = SplitConfig {
            train_fraction: 0.5,
            seed: 3,
        }
        .split(&d)
        .unwrap();
        assert_eq!(a.len() + b.len(), 101);
        let mut xs: Vec<f64> = (0..a.len()).map(|i| a.x(i)[0]).collect();
        xs.extend((0..b.len()).map(|i| b.x(i)[0]));
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, (0..101).map(|i| i as f64).collect::<Vec<_>>());
        // Rows stay paired.
        for i in 0..a.len() {
            assert_eq!(a.y(i).values()[0], 2.0 * a.x(i)[0]);
        }
    }

    #[test]
    fn three_way_split_sizes() {
        let parts = line(10).split_fractions(&[0.4, 0.3], 1).unwrap();
        let sizes: Vec<_> = parts.iter().map(LabeledDataset::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        let parts = line(10).split_fractions(&[0.5, 0.5], 1).unwrap();
        assert_eq!(parts.len(), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(line(1)
            .split_fractions(&[0.5], 0)
            .is_err());
        let r = LabeledDataset::from_rows(
            vec![vec![f64::NAN]],
            &[ResponsePoint::euclidean(vec![1.0])],
        );
        assert!(r.is_err());
        let r = LabeledDataset::from_rows(
            vec![vec![0.0], vec![1.0]],
            &[ResponsePoint::euclidean(vec![1.0]), ResponsePoint::euclidean(vec![1.0, 2.0])],
        );
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }
}

//! Conformal prediction regions for responses in metric spaces: Euclidean
//! vectors and one-dimensional distributions represented by quantile
//! functions.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod experiment;
pub mod frechet;
pub mod isotonic;
pub mod metric;
pub mod neighbors;
pub mod regions;
pub mod rng;
pub mod simulation;

pub use dataset::{LabeledDataset, Responses, SplitConfig};
pub use error::{Error, Result};
pub use exec::Execution;
pub use frechet::{KChoice, MeanEstimator, MeanSpec};
pub use metric::{distance, MetricKind, PointRef, QuantileGrid, ResponsePoint};
pub use regions::{
    ConformalizedHeteroModel, HeteroscedasticRegionModel, HomoscedasticRegionModel, PredictionRegion,
    RegionOptions, RegionPredictor, TunedKnnModel,
};
pub use evaluation::{CoverageCurve, CoverageReport, EvalOptions};
pub use experiment::{AlgorithmConfig, AlgorithmSpec, ExperimentSpec, FittedModel};
pub use simulation::ScenarioSpec;

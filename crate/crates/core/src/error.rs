use thiserror::Error;

/// Errors raised by fitting, prediction and evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("metric {metric} cannot be applied to {point} responses")]
    IncompatibleMetric {
        metric: &'static str,
        point: &'static str,
    },

    #[error("quantile values decrease at index {index}")]
    NonMonotoneQuantile { index: usize },

    #[error("invalid response point: {0}")]
    InvalidPoint(String),

    #[error("quantile grids of the two points differ")]
    GridMismatch,

    #[error("metric {0} has no closed-form Fréchet mean; use a Euclidean-L2 or Wasserstein-2 fit metric")]
    UnsupportedFitMetric(&'static str),

    #[error("model has no training data")]
    EmptyModel,

    #[error("need at least {needed} samples, have {have}")]
    TooFewSamples { needed: usize, have: usize },

    #[error("Fréchet regression weights sum to zero")]
    WeightsSumToZero,

    #[error("candidate k grid is empty")]
    KGridEmpty,

    #[error("k = {k} exceeds the {available} available neighbours")]
    KTooLarge { k: usize, available: usize },

    #[error("cannot take a quantile of an empty sample")]
    EmptyValues,

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("conditional coverage curves need a scalar predictor, got dimension {0}")]
    MultivariateUnsupported(usize),

    #[error("scenario {0} has no closed-form oracle region")]
    UnsupportedScenario(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("replicate {index}: {source}")]
    Replicate { index: usize, source: Box<Error> },
}

impl Error {
    /// The underlying error, with replicate context removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Replicate { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

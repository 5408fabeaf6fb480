use metric_regions::Error;

/// Failures grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e.root() {
            Error::InvalidParameter(_)
            | Error::KGridEmpty
            | Error::KTooLarge { .. }
            | Error::UnsupportedFitMetric(_)
            | Error::UnsupportedScenario(_)
            | Error::MultivariateUnsupported(_)
            | Error::IncompatibleMetric { .. } => CliError::Config(msg),
            Error::WeightsSumToZero | Error::EmptyValues | Error::EmptyModel => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

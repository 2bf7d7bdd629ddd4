use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: cannot parse column `{column}`: {message}")]
    Parse { row: usize, column: String, message: String },

    #[error("{}validation failed: {message}", row.map(|r| format!("row {r}: ")).unwrap_or_default())]
    Validation { row: Option<usize>, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("labels are perfectly separated; coefficient for `{covariate}` diverges")]
    Separation { covariate: String },

    #[error("design matrix is rank deficient at column `{column}`")]
    RankDeficient { column: String },

    #[error("logistic fit did not converge after {iterations} iterations")]
    LogisticNotConverged { iterations: usize },

    #[error("propensity score {value} for subject {index} is outside (0, 1)")]
    ScoreOutOfRange { index: usize, value: f64 },

    #[error("hazard mass {index} is negative or non-finite ({value})")]
    NegativeMass { index: usize, value: f64 },

    #[error("grid index {index} out of range for {len} grid points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no events in the working sample")]
    NoEvents,

    #[error("subject is almost surely truncated (enrollment normalizer is zero)")]
    CertainTruncation,

    #[error("Cox M-step did not converge after {iterations} iterations (last beta {beta:?})")]
    MStepNotConverged { iterations: usize, beta: Vec<f64> },

    #[error("stratum {stratum} with exposure {exposed} is cured; no survival distribution")]
    CuredCombination { stratum: String, exposed: bool },

    #[error("Hessian is singular in the S-step for parameter `{parameter}`")]
    SingularHessian { parameter: String },

    #[error("S-step failed at iteration {iteration}: {source}")]
    SStep {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{dropped} of {total} bootstrap replicates failed (more than 20%)")]
    TooManyDropped { dropped: usize, total: usize },

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Validation { row, message: message.into() }
    }
}

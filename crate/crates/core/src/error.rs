use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("singular basis: {0}")]
    SingularBasis(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid mode: {0}")]
    InvalidMode(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate adaptive-weight update: every error measure is zero")]
    DegenerateUpdate,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("collapsed-coordinate singularity: {0}")]
    CoordinateSingularity(String),

    #[error("degenerate collapsed coordinates: {0}")]
    DegenerateCoordinates(String),

    #[error("data validation failed at row {row}: {detail}")]
    DataValidation { row: usize, detail: String },

    #[error("recursive rollout diverged in segment {segment}: {detail}")]
    RolloutDivergence { segment: usize, detail: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("integration failed at output index {time_index}: {detail}")]
    IntegrationFailure { time_index: usize, detail: String },

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("undefined relative degree: C·A^(k-1)·B vanishes for every k ≤ {max_order}")]
    UndefinedRelativeDegree { max_order: usize },

    #[error("state diverged (non-finite value) at t = {time} s")]
    Divergence { time: f64 },

    #[error("window end t = {time} s is not a logged timestamp or the window is not a multiple of the step")]
    UnalignedWindow { time: f64 },

    #[error("insufficient trajectory: need data back to t = {required} s, earliest logged is t = {available} s")]
    InsufficientData { required: f64, available: f64 },

    #[error("non-identifiable: gram matrix is rank deficient (λ_min = {min_eig:e})")]
    NonIdentifiable { min_eig: f64 },

    #[error("estimator diverged at iteration {iteration}; reduce the learning rate (η_θ = {eta})")]
    EstimatorDivergence { iteration: usize, eta: f64 },

    #[error("degenerate predictor: 𝓜 condition estimate {condition:e} exceeds limit")]
    DegeneratePredictor { condition: f64 },

    #[error("{what} must be symmetric positive {kind}")]
    NotDefinite { what: &'static str, kind: &'static str },

    #[error("invalid input bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("rank condition never satisfied before the t = {deadline} s deadline")]
    RankNeverAchieved { deadline: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

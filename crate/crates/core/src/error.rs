use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degree too high: {degree} exceeds the supported maximum {max}")]
    DegreeTooHigh { degree: usize, max: usize },

    #[error("degenerate variance ({var:e}); use the point-mass path")]
    DegenerateVariance { var: f64 },

    #[error("ill-conditioned system: condition estimate {condition:.3e} at ridge {ridge:.1e}")]
    IllConditioned { condition: f64, ridge: f64 },

    #[error("resource budget exceeded: feature dimension D = {dim} exceeds limit {limit}")]
    Budget { dim: usize, limit: usize },

    #[error(
        "closed-form mixture quadratic disabled for d = {d} (limit {limit}); \
         fit under N(0, I) and use refine_quadratic instead"
    )]
    UseRefine { d: usize, limit: usize },

    #[error("refinement diverged at step {step}; reduce the step size (currently {step_size:e})")]
    StepSize { step: usize, step_size: f64 },

    #[error("training diverged at step {step}: non-finite loss")]
    TrainingDiverged { step: usize },

    #[error("FVU undefined: network output variance is zero")]
    ZeroOutputVariance,

    #[error("bundle format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::DegreeTooHigh { .. }
            | Error::Format { .. }
            | Error::Json(_)
            | Error::UseRefine { .. } => 2,
            Error::DegenerateVariance { .. }
            | Error::IllConditioned { .. }
            | Error::StepSize { .. }
            | Error::TrainingDiverged { .. }
            | Error::ZeroOutputVariance => 3,
            Error::Budget { .. } => 4,
            Error::Io(_) | Error::Csv(_) => 2,
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("contact normal has zero norm")]
    ZeroNormal,

    #[error("stiffness matrix K is singular")]
    SingularStiffness,

    #[error(
        "pseudo-static deflection did not converge after {iterations} iterations \
         (last step {last_step:.3e}); joint stiffness too low for the applied load"
    )]
    DeflectionDiverged { iterations: usize, last_step: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("estimate {value} outside projection bounds [{lo}, {hi}]")]
    OutOfProjectionBounds { value: f64, lo: f64, hi: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("plot rendering failed: {0}")]
    Plot(String),

    #[error("empty run log")]
    EmptyLog,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

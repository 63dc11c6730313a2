use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid angle vector: {0}")]
    InvalidAngles(String),

    #[error("degenerate parametrization: columns {first} and {second} are {angle:.4} rad apart (epsilon {epsilon})")]
    Degenerate {
        first: usize,
        second: usize,
        angle: f64,
        epsilon: f64,
    },

    #[error("unsupported dimension n = {n}: {what}")]
    UnsupportedDimension { n: usize, what: &'static str },

    #[error("invalid sensor panel: {0}")]
    InvalidPanel(String),

    #[error("evaluation point trimmed: |cf| = {modulus:.3e} below trim {trim}")]
    Trimmed { modulus: f64, trim: f64 },

    #[error("branch tracking failed: phase step {step:.3} rad between ray points; use a finer ray grid")]
    BranchTracking { step: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("eigendecomposition failed (condition number {condition:.3e})")]
    Eigen { condition: f64 },

    #[error("rank-deficient variance bracket, null direction {direction:?}")]
    RankDeficient { direction: Vec<f64> },

    #[error("excessive trimming: {percent:.1}% of grid mass removed (fat tails or vanishing cf)")]
    ExcessiveTrimming { percent: f64 },

    #[error("specification test undefined: {0}")]
    TestUndefined(String),

    #[error("singular regressor Gram matrix in VAR (collinear regressors)")]
    Collinearity,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("bootstrap failed: {failed} of {draws} draws failed")]
    Bootstrap { failed: usize, draws: usize },

    #[error("Monte Carlo harness failed: {failed} of {reps} replications failed")]
    Harness { failed: usize, reps: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures map to exit code 1, input problems to 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Config(_) | Error::InvalidPanel(_) | Error::Io(_) | Error::Json(_)
        )
    }
}

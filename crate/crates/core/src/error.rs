use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    Dimension {
        field: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("Riccati iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    RiccatiNoConvergence { iterations: usize, residual: f64 },

    #[error("Riccati iterate became indefinite at iteration {iteration} (min eigenvalue {min_eig:e})")]
    RiccatiIndefinite { iteration: usize, min_eig: f64 },

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("predictor form is not stable: spectral radius of A - FC is {rho}")]
    UnstablePredictor { rho: f64 },

    #[error("step contract violated: {0}")]
    Contract(&'static str),

    #[error("controller output at step {step}: expected {expected} entries, got {got}")]
    ControllerOutput {
        step: usize,
        expected: usize,
        got: usize,
    },

    #[error("ground-truth quantity unavailable: {0}")]
    MissingGroundTruth(&'static str),

    #[error("normal equations are numerically singular (min eigenvalue {min_eig:e}, max eigenvalue {max_eig:e})")]
    SingularDesign { min_eig: f64, max_eig: f64 },

    #[error("insufficient excitation or wrong order: sigma_n = {sigma_n:e}, sigma_1 = {sigma_1:e}")]
    RankDeficient {
        sigma_n: f64,
        sigma_1: f64,
        hankel_sv: Vec<f64>,
    },

    #[error("destabilizing LDC: closed-loop spectral radius {rho}")]
    DestabilizingLdc { rho: f64 },

    #[error("optimizer did not converge (gradient norm {grad_norm:e} after {iterations} iterations)")]
    NoConvergence { grad_norm: f64, iterations: usize },

    #[error("random system generation exhausted {retries} retries")]
    RetryBudget { retries: usize },

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(field: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            field,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}

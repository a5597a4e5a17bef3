use thiserror::Error;

/// Errors produced by the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An aberration state with an unsupported number of coefficients was passed
    /// to an operation that only handles the lowest-order expansion.
    #[error("unsupported aberration order: expected {expected} coefficients, got {got}")]
    UnsupportedAberrationOrder { expected: usize, got: usize },

    /// Invalid configuration value or inconsistent options.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input grid is not square or its length disagrees with the declared shape.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite rate or other unusable value fed to the simulator.
    #[error("simulation error: {0}")]
    Simulation(String),

    /// Numerical failure (non-positive-definite covariance after jitter
    /// escalation, singular system, non-finite intermediate).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// VAE training diverged.
    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    /// Every candidate received zero posterior mass.
    #[error("degenerate candidate weights: {0}")]
    DegenerateWeights(String),

    /// Requested more components than the data rank supports.
    #[error("rank error: {0}")]
    Rank(String),

    /// A constructed counterexample failed its own validity tolerance.
    #[error("counterexample invalid: {0}")]
    CounterexampleInvalid(String),

    /// Quadrature or sampling grid too coarse for the requested transform.
    #[error("resolution error: {0}")]
    Resolution(String),

    /// Malformed or incompatible persisted artifact.
    #[error("persistence error: {0}")]
    Persist(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

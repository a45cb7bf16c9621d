use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("T1 correction undefined for A = {a} (A must be positive)")]
    CorrectionUndefined { a: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("k-space coordinate ({kx}, {ky}) lies outside [-0.5, 0.5]^2")]
    CoordinateOutOfRange { kx: f64, ky: f64 },

    #[error("kinematic projection did not converge after {iterations} iterations (worst violation {worst:.3e})")]
    ProjectionDiverged { iterations: usize, worst: f64 },

    #[error("decay fit produced no valid pixels")]
    NoValidPixels,

    #[error("non-finite loss at iteration {iteration} of stage {stage} (last finite loss {last_finite:?})")]
    NonFiniteLoss { stage: String, iteration: usize, last_finite: Option<f64> },

    #[error("trajectory is frozen; control points cannot be updated")]
    Frozen,

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

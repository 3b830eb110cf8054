use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state is within {radius:e} of a primary (r1 = {r1:e}, r2 = {r2:e})")]
    Singularity { r1: f64, r2: f64, radius: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("no y = 0 crossing found before t = {0}")]
    CrossingNotFound(f64),

    #[error("amplitude {amplitude} outside the valid range [0, {max}]")]
    AmplitudeOutOfRange { amplitude: f64, max: f64 },

    #[error("location angle undefined: projected offset has zero length")]
    UndefinedAngle,

    #[error("ill-conditioned fit: numerical rank {rank} below expected {expected}; add data or lower the degree")]
    IllConditionedFit { rank: usize, expected: usize },

    #[error("chi = {chi} outside the model range [{lo}, {hi}]")]
    ChiOutOfRange { chi: f64, lo: f64, hi: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

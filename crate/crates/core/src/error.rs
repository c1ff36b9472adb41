use thiserror::Error;

/// Errors raised across the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("distribution is not normalized (sum = {sum})")]
    Unnormalized { sum: f64 },

    #[error("histogram is empty")]
    EmptyHistogram,

    #[error("moment order ({l_a}, {l_b}) out of range for bins ({bins_a}, {bins_b})")]
    OrderOutOfRange {
        l_a: usize,
        l_b: usize,
        bins_a: usize,
        bins_b: usize,
    },

    #[error("need at least {needed} events, got {got}")]
    TooFewEvents { needed: u64, got: u64 },

    #[error("moment value {0} is not positive; response is not finite")]
    NonPositiveMoment(f64),

    #[error("insufficient points: need {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),

    #[error("linear coefficient vanishes")]
    VanishingLinear,

    #[error("detector has no per-bin configuration")]
    MissingPerBin,

    #[error("truncation tail {tail:e} exceeds tolerance {tolerance:e}")]
    Truncation { tail: f64, tolerance: f64 },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

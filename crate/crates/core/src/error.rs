use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("importance weight undefined: behavior policy has zero probability for action {action} in state {state}")]
    ZeroBehaviorProbability { state: usize, action: usize },

    #[error("Markov chain is not irreducible: {closed_classes} closed communicating classes")]
    NotIrreducible { closed_classes: usize },

    #[error("matrix is singular or ill-conditioned (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("feature matrix is rank deficient (smallest normalized singular value {min_singular:e})")]
    RankDeficient { min_singular: f64 },

    #[error("generator gave up after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("time {t} outside trajectory range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("log is thinned around t = {t}; consecutive iterates are required")]
    ThinnedLog { t: f64 },

    #[error("log does not cover [{needed_start}, {needed_end}] with consecutive iterates and noise states")]
    InsufficientLog { needed_start: f64, needed_end: f64 },

    #[error("noise path ends at t = {covered}, integration needs t = {needed}")]
    InsufficientCoverage { covered: f64, needed: f64 },

    #[error("non-finite state encountered at t = {t}")]
    NonFinite { t: f64 },

    #[error("problem does not provide exact conditional means")]
    MissingExactMeans,
}

use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate alignment: {0} has zero norm")]
    DegenerateAlignment(&'static str),

    #[error("alignment identity violated: rrc={rrc}, ratio*rel_update={product}")]
    IdentityViolation { rrc: f64, product: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("step {t} outside schedule range [0, {total}]")]
    StepOutOfRange { t: u64, total: u64 },

    #[error("decay multiplier 1 - eta*lambda = {0} is not in (0, 1]")]
    DecayMultiplier(f64),

    #[error("no equilibrium without weight decay (lambda = 0)")]
    NoEquilibrium,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("every run diverged: {0}")]
    AllDiverged(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

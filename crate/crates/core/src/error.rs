use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no root: {0}")]
    NoRoot(String),

    #[error("tolerance not met: requested {requested:e}, estimated {estimated:e} after {subdivisions} subdivisions")]
    Tolerance {
        requested: f64,
        estimated: f64,
        subdivisions: usize,
    },

    #[error("step size underflow at t = {0}")]
    StepUnderflow(f64),

    #[error("too many steps ({0})")]
    TooManySteps(usize),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("loss of precision: {0}")]
    Precision(String),

    #[error("no plateau: {0}")]
    NoPlateau(String),

    #[error("insufficient samples: need {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("matching failure: {0}")]
    Matching(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised while validating models or running filters and experiments.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("state space must have at least 2 states, got {0}")]
    TooFewStates(usize),

    #[error("negative off-diagonal intensity {value} at ({row}, {col})")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },

    #[error("row {row} of the generator sums to {sum}, expected 0")]
    RowSumNonzero { row: usize, sum: f64 },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("generator is not mixing: intensity ({row}, {col}) is zero")]
    NotMixing { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("weights do not form a probability vector (sum = {sum})")]
    NotProbability { sum: f64 },

    #[error("initial condition touches the simplex boundary at component {index}")]
    BoundaryInitialCondition { index: usize },

    #[error("vector is not tangent to the simplex (sum = {sum})")]
    NotTangent { sum: f64 },

    #[error("entry {index} is not strictly positive ({value})")]
    NonPositiveEntry { index: usize, value: f64 },

    #[error("state {0} is absorbing")]
    AbsorbingState(usize),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("path does not match the time grid: {0}")]
    GridMismatch(String),

    #[error("Euler-Maruyama step collapsed (component {index} = {value})")]
    StateCollapse { index: usize, value: f64 },

    #[error("flow is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),

    #[error("observation maps differ; the representation requires identical levels")]
    ObservationMismatch,

    #[error("at least {min} trials are required, got {got}")]
    InsufficientTrials { min: usize, got: usize },

    #[error("unknown experiment '{0}'")]
    UnknownExperiment(String),

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

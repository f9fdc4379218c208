use thiserror::Error;

/// Errors surfaced by the library. Each variant maps to one failure class the
/// command-line front end turns into an exit code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("machine is not reversible: {0}")]
    NotReversible(String),
    #[error("malformed configuration: {0}")]
    MalformedConfiguration(String),
    #[error("malformed machine spec: {0}")]
    MalformedSpec(String),
    #[error("inner machine is not reversible: {0}")]
    InnerNotReversible(String),
    #[error("symbol budget exceeded: site dimension {dim} > budget {budget}")]
    SymbolBudgetExceeded { dim: usize, budget: usize },
    #[error("orbit was truncated before reaching a dead end or a cycle")]
    TruncatedOrbit,
    #[error("dimension guard: {what} = {value} exceeds {limit}")]
    DimensionGuard {
        what: &'static str,
        value: u128,
        limit: u128,
    },
    #[error("input promise violated: {0}")]
    PromiseViolated(String),
    #[error("no codeword within the recovery window")]
    NoValidCodeword,
    #[error("parameter constraint violated: {0}")]
    ParamsViolation(String),
    #[error("rotation oracle promise violated: {0}")]
    OraclePromiseViolated(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("precision violation: {0}")]
    PrecisionViolation(String),
    #[error("tolerance violation: {0}")]
    ToleranceViolation(String),
    #[error("gap violation: measured gap {measured:e} below floor {floor:e}")]
    GapViolation { measured: f64, floor: f64 },
    #[error("promise violation: {0}")]
    PromiseViolation(String),
    #[error("degenerate observable: diagonal entries on the two reference states coincide")]
    DegenerateObservable,
    #[error("overlap violation: {0}")]
    OverlapViolation(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

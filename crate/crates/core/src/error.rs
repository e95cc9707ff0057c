use thiserror::Error;

/// Errors raised by the sampling, oracle and analysis routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CapsError {
    #[error("unreachable prefix {0:?}")]
    UnreachablePrefix(Vec<usize>),
    #[error("horizon exceeded: step {step} with horizon {horizon}")]
    HorizonExceeded { step: usize, horizon: usize },
    #[error("action out of range: {action} not in 0..{size}")]
    ActionOutOfRange { action: usize, size: usize },
    #[error("invalid action space: size {0} (need at least 2)")]
    InvalidActionSpace(usize),
    #[error("invalid pivotal spec: {0}")]
    InvalidPivotalSpec(String),
    #[error("invalid drift spec: {0}")]
    InvalidDriftSpec(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("enumeration cap exceeded: more than {cap} trajectories")]
    EnumerationCapExceeded { cap: usize },
    #[error("support mismatch between distribution tables")]
    SupportMismatch,
    #[error("no finite flip threshold: ln N = {ln_n} <= ln(eps'/eps) = {ln_ratio}")]
    NoFiniteFlipThreshold { ln_n: f64, ln_ratio: f64 },
    #[error("not a distribution: total mass {0}")]
    NotADistribution(f64),
    #[error("budget out of range: {0}")]
    BudgetOutOfRange(String),
    #[error("degenerate comparison: both trajectories have zero probability")]
    DegenerateComparison,
    #[error("unbounded horizon: drift rate is zero")]
    UnboundedHorizon,
    #[error("underpowered estimate: {trials} trials (need at least {min})")]
    UnderpoweredEstimate { trials: usize, min: usize },
    #[error("non-stochastic kernel: {0}")]
    NonStochasticKernel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T, E = CapsError> = std::result::Result<T, E>;

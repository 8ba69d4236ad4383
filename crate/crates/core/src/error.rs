use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstanceError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("member '{member}' has unknown value '{value}' for feature '{feature}'")]
    UnknownValue {
        member: String,
        feature: String,
        value: String,
    },
    #[error("member '{member}' has no value for feature '{feature}'")]
    MissingAttribute { member: String, feature: String },
    #[error("unknown feature '{0}'")]
    UnknownFeature(String),
    #[error("quota {feature}={value} [{min}, {max}] violates 0 <= min <= max <= k = {panel_size}")]
    QuotaBounds {
        feature: String,
        value: String,
        min: u32,
        max: u32,
        panel_size: usize,
    },
    #[error(
        "quotas infeasible by counting for feature '{feature}': sum of minimums {sum_min}, \
         sum of maximums {sum_max}, panel size {panel_size}"
    )]
    InfeasibleByCounting {
        feature: String,
        sum_min: u64,
        sum_max: u64,
        panel_size: usize,
    },
    #[error("invalid instance: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CountingError {
    #[error(
        "memory budget exceeded at layer {layer}: {live_states} live states \
         (~{estimated_bytes} bytes, budget {budget_bytes})"
    )]
    ResourceExceeded {
        layer: usize,
        live_states: usize,
        estimated_bytes: u64,
        budget_bytes: u64,
    },
    #[error("state key needs {bits} bits, more than the 128 available")]
    KeyTooWide { bits: u32 },
    #[error("pruning table is incompatible: {0}")]
    IncompatiblePruneTable(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("table was built without retained counts and cannot be sampled")]
    CountsNotRetained,
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("cannot sample: the weighted panel count is zero")]
    ZeroCount,
    #[error("no acceptable panel after {attempts} attempts (empirical acceptance rate {acceptance_rate})")]
    Timeout { attempts: u64, acceptance_rate: f64 },
    #[error("no panel exists: features {features:?} already admit zero panels")]
    Infeasible { features: Vec<String> },
    #[error(transparent)]
    Counting(#[from] CountingError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("invalid targets: {0}")]
    InvalidTargets(String),
    #[error("time budget exhausted after {iterations} iteration(s); at least 2 are required")]
    Timeout { iterations: usize },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("refusing to enumerate {subsets} subsets (guard is {guard})")]
    GuardExceeded { subsets: u128, guard: u128 },
    #[error(
        "target appears to lie on the boundary of the marginal polytope: \
         gradient norm {grad_norm:e} after {iterations} iterations with theta spread {theta_spread}"
    )]
    BoundaryTarget {
        grad_norm: f64,
        theta_spread: f64,
        iterations: usize,
    },
    #[error("did not converge: gradient norm {grad_norm:e} after {iterations} iterations")]
    NotConverged { grad_norm: f64, iterations: usize },
    #[error("no feasible panels")]
    NoPanels,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LotteryError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed lottery file at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("index {index} out of range for a lottery of {m} panels")]
    IndexOutOfRange { index: u64, m: usize },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Umbrella error for callers that drive several stages.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Counting(#[from] CountingError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Lottery(#[from] LotteryError),
    #[error("{0}")]
    Other(String),
}

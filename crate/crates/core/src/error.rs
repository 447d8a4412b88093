use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("riccati iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    RiccatiNotConverged { iterations: usize, last_change: f64 },

    #[error("nlp has no strictly interior point (phase-I violation {violation:e})")]
    Infeasible { violation: f64 },

    #[error("interior-point solver hit the iteration cap ({iterations}) with residual {residual:e}")]
    MaxIterations { iterations: usize, residual: f64 },

    #[error("singular KKT matrix (smallest pivot {smallest_pivot:e})")]
    SingularKkt { smallest_pivot: f64 },

    #[error("primal-dual point is stale: residual {residual:e} exceeds {limit:e}")]
    StalePoint { residual: f64, limit: f64 },

    #[error("no feasible first integer input at state {state}")]
    EmptyFeasibleSet { state: f64 },

    #[error("all completion branches failed to converge for first input {first:?}")]
    AllBranchesFailed { first: Vec<u8> },

    #[error("missing value-function gradient for feasible branch {first:?}")]
    MissingGradient { first: Vec<u8> },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("policy evaluation did not converge after {sweeps} sweeps (residual {residual:e})")]
    PolicyEvaluationNotConverged { sweeps: usize, residual: f64 },

    #[error("rank-deficient advantage features (condition estimate {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("non-finite gradient component at RL step {step}")]
    NonFiniteGradient { step: usize },

    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_record(self, index: usize) -> Error {
        Error::Record {
            index,
            source: Box::new(self),
        }
    }

    /// Strips [`Error::Record`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Record { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised by the differentiation engine and optimizers.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("numeric failure: non-finite value produced by {op}")]
    NumericFailure { op: &'static str },

    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("structural mismatch: {0}")]
    Structural(String),
}

/// Errors raised while validating or processing trajectories.
#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid trajectory: behavior probability at step {step} is {value} (must be > 0)")]
    NonPositiveBehaviorProb { step: usize, value: f64 },

    #[error("invalid trajectory: inconsistent lengths ({0})")]
    LengthMismatch(String),

    #[error("invalid v-trace config: {0}")]
    InvalidConfig(String),
}

/// Errors raised by loss evaluation.
#[derive(Debug, Error)]
pub enum LossError {
    #[error("squashed action saturated at +/-1 in dimension {dim}")]
    Saturated { dim: usize },
}

/// Errors raised by the exact tabular operator analysis.
#[derive(Debug, Error)]
pub enum TabularError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy table: {0}")]
    InvalidPolicy(String),

    #[error("invalid operator config: {0}")]
    InvalidConfig(String),

    #[error("operator divergence: spectral radius of the discounted trace matrix is {radius} >= 1")]
    Divergence { radius: f64 },

    #[error("numeric failure in {0}")]
    Numeric(&'static str),
}

/// Errors raised by the agent while training.
#[derive(Debug, Error)]
pub enum AgentError {
    #[error("numeric failure in head {head}: {source}")]
    HeadNumeric {
        head: usize,
        #[source]
        source: DiffError,
    },

    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),
}

/// Errors raised by the actor-learner harness.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("queue closed")]
    QueueClosed,

    #[error("environment fault: {0}")]
    EnvFault(String),

    #[error(transparent)]
    Agent(#[from] AgentError),
}

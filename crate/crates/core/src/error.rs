use thiserror::Error;

/// Errors raised by tree construction, the per-node solvers and the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdxError {
    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("probabilities must sum to 1 at node {node} (sum = {sum})")]
    NotStochastic { node: usize, sum: f64 },

    #[error("branch probability {p} at node {node} is not in (0, 1]")]
    ZeroProbability { node: usize, p: f64 },

    #[error("process does not match tree: {0}")]
    Mismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("node {0} is a leaf")]
    LeafNode(usize),

    #[error("covariance at node {node} is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { node: usize, min_eig: f64 },

    #[error("node {node} admits arbitrage: {detail}")]
    Arbitrage { node: usize, detail: String },

    #[error("Newton iteration did not converge at node {node} (residual {residual:e})")]
    NoConvergence { node: usize, residual: f64 },

    #[error("stochastic exponential requires Z(0) = 0, got {0}")]
    NonzeroStart(f64),

    #[error("jump {jump} at node {node} violates the lower bound -1")]
    JumpTooNegative { node: usize, jump: f64 },

    #[error("deflator value {value} at node {node} is not strictly positive")]
    NonPositive { node: usize, value: f64 },

    #[error("decompositions reconstruct different value processes (max gap {0:e})")]
    DifferentValue(f64),

    #[error("internal error at node {node}: {detail}")]
    Internal { node: usize, detail: String },

    #[error("non-finite value on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, OdxError>;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("malformed topology: edge {edge} has endpoint {endpoint} out of range (1..={num_nodes})")]
    EdgeEndpointOutOfRange {
        edge: usize,
        endpoint: usize,
        num_nodes: usize,
    },
    #[error("malformed topology: edge {edge} is a self-loop at node {node}")]
    SelfLoop { edge: usize, node: usize },
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("k-means: k={k} exceeds the number of distinct samples ({distinct})")]
    KMeansTooManyClusters { k: usize, distinct: usize },
    #[error("edge price subproblem unbounded at edge {edge}, stage {stage}")]
    UnboundedEdgeProblem { edge: usize, stage: usize },
    #[error("edge resource subproblem infeasible at stage {stage}: {reason}")]
    EdgeResourceInfeasible { stage: usize, reason: String },
    #[error("nodal subproblem infeasible at node {node}: value at the initial state is +inf")]
    NodalInfeasible { node: usize },
    #[error("resource gradient undefined at stage {stage}: both perturbations are infeasible")]
    GradientUndefined { stage: usize },
    #[error("stage problem failed at stage {stage}: {reason}")]
    StageSolveFailed { stage: usize, reason: String },
    #[error("one-step policy infeasible at stage {stage}: {reason}")]
    PolicyInfeasible { stage: usize, reason: String },
    #[error("coordination failed: {0}")]
    Coordination(String),
    #[error("oracle size guard exceeded: {count} evaluations (limit {limit})")]
    OracleTooLarge { count: u64, limit: u64 },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

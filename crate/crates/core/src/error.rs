use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid link measurement {pair}: {reason}")]
    InvalidMeasurement { pair: String, reason: String },

    #[error("invalid benchmark for device `{device}`: {reason}")]
    InvalidBenchmark { device: String, reason: String },

    #[error("invalid device `{device}`: {reason}")]
    InvalidDevice { device: String, reason: String },

    #[error("incomplete topology: missing pairs [{}], duplicate pairs [{}]", missing.join(", "), duplicates.join(", "))]
    IncompleteTopology {
        missing: Vec<String>,
        duplicates: Vec<String>,
    },

    #[error("cluster has no devices")]
    EmptyCluster,

    #[error("invalid group pair: {0}")]
    InvalidPair(String),

    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),

    #[error("degenerate group {group}: {reason}")]
    DegenerateGroup { group: String, reason: String },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("capacity ratios {ratios:?} admit no rank-1 grid factorization")]
    Factorization { ratios: Vec<f64> },

    #[error("no feasible plan: {0}")]
    NoFeasiblePlan(String),

    #[error("invalid timing: {0}")]
    InvalidTiming(String),

    #[error("invalid network trace: {0}")]
    InvalidTrace(String),

    #[error("scheduling bug at t={time}: {detail}")]
    SchedulingBug { time: f64, detail: String },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

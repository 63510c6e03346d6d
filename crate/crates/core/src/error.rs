use thiserror::Error;

/// Errors surfaced by graph construction, simulation, and statistics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("graph is not finite; this operation requires a finite vertex set")]
    InfiniteGraph,

    #[error("state space exceeds cap: reached {count} states (cap {cap})")]
    StateCapExceeded { count: usize, cap: usize },

    #[error("label ({site}, {index}) is not present in the initial condition")]
    LabelAbsent { site: String, index: i32 },

    #[error("invariant `{invariant}` violated (seed {seed}): {detail}")]
    InvariantViolation {
        invariant: String,
        seed: u64,
        detail: String,
    },

    #[error("equal-rate coupling requires D_A = D_B (got {da} and {db}); use the general coupling")]
    UseGeneralCoupling { da: f64, db: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

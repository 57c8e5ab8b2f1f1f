//! Error type shared by every stage of the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("control component {index} = {value} exceeds bound {bound}")]
    BoundViolation { index: usize, value: f64, bound: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("cannot parse sub-task description {text:?}: {reason}")]
    Parse { text: String, reason: String },

    #[error("degenerate cost: {0}")]
    DegenerateCost(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("numerical error at task {task}, demo {demo}: {reason}")]
    Numerical {
        task: usize,
        demo: usize,
        reason: String,
    },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error("insufficient counterexamples for demo {demo}: 0 kept after {attempts} attempts")]
    InsufficientCounterexamples { demo: usize, attempts: usize },

    #[error("no constraint in family {family} passes the feasibility post-check after {restarts} restarts")]
    InfeasibleFamily { family: String, restarts: usize },

    #[error("embedding provider error: {0}")]
    Embedding(String),

    #[error("planner error: {0}")]
    Planner(String),

    #[error("unparsable plan: {0}")]
    PlanParse(String),

    #[error("no planner rule for command {0:?}")]
    NoRule(String),

    #[error("version mismatch: expected {expected:?}, found {found:?}")]
    Version { expected: String, found: String },

    #[error("malformed input at line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error("model file error: {0}")]
    Model(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

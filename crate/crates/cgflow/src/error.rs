//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CgError {
    /// Shape mismatch inside a recorded computation, pointing at the
    /// offending op.
    #[error("shape mismatch at op {op_index} ({op_name}): {detail}")]
    Shape {
        op_index: usize,
        op_name: &'static str,
        detail: String,
    },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("solver exceeded budget of {max_evals} function evaluations near t = {t}")]
    SolverBudget { max_evals: usize, t: f64 },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("non-finite values encountered in {context}")]
    NonFinite { context: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed graph record at line {line}: {detail}")]
    GraphParse { line: usize, detail: String },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("sampler exhausted {attempts} attempts without producing a connected graph")]
    SamplerExhausted { attempts: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CgError>;

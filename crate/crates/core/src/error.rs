use thiserror::Error;

/// Errors raised by grids, solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("problem validation failed: {0}")]
    Validation(String),

    #[error("coefficient evaluation produced a non-finite value ({what}) at node {node}")]
    Evaluation { what: &'static str, node: usize },

    #[error("solver diverged at step {step} (t = {time})")]
    Divergence { step: usize, time: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("noise shape {got:?} does not match mesh/modes {expected:?}")]
    NoiseShape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("path ensemble has no surviving paths")]
    EmptyEnsemble,

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

use crate::backends::Stream;
use crate::trace::TraceError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },

    #[error("data length {len} does not match shape {shape:?}")]
    Length { len: usize, shape: Vec<usize> },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("sampler is already at the terminal state t = 0")]
    TerminalState,

    #[error("score undefined at t = {t}: noise coefficient is zero")]
    UndefinedScore { t: usize },

    #[error("trace has no record for t = {t}, stream {stream}")]
    TraceIncomplete { t: usize, stream: Stream },

    #[error("invalid skip plan: {0}")]
    PlanInvalid(String),

    #[error("no feasible window: {constraint} ({detail})")]
    Infeasible { constraint: &'static str, detail: String },

    #[error("metadata mismatch: {0}")]
    Metadata(String),

    #[error(transparent)]
    Trace(#[from] TraceError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

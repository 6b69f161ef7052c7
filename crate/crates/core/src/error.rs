use std::path::PathBuf;

use thiserror::Error;

use crate::model::{Trajectory, Violation};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structured output did not parse after {attempts} attempts: {last_error}")]
    StructuredOutput { attempts: u32, last_error: String },

    #[error("cassette miss for request digest {digest}")]
    CassetteMiss { digest: String },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("gateway misconfigured: {0}")]
    Config(String),

    #[error("batch item {index} failed: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("grounding produced no aspects for feedback {feedback_id}")]
    EmptyGrounding { feedback_id: String },

    #[error("grounding referenced steps outside the trajectory after repair: {detail}")]
    GroundingBounds { detail: String },

    #[error("grounding produced {count} aspects, above the cap of {cap}")]
    GroundingCount { count: usize, cap: usize },

    #[error("clustering returned {got} metrics, expected exactly {expected}")]
    Cardinality { expected: usize, got: usize },

    #[error("malformed model output: {0}")]
    Schema(String),

    #[error("frozen metric definition was changed: {metric_id}")]
    FrozenDefinition { metric_id: String },

    #[error("judge output incomplete: {0}")]
    JudgeSchema(String),

    #[error("duplicate rating for trajectory {trajectory_id}, metric {metric_id}")]
    DuplicateRating {
        trajectory_id: String,
        metric_id: String,
    },

    #[error("nothing to evaluate: {0}")]
    EmptyEvaluation(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("aspect set too large for the prompt budget: {0}")]
    PromptBudget(String),

    #[error("episode failed on {task_id}: {message}")]
    Episode {
        task_id: String,
        message: String,
        partial: Box<Trajectory>,
    },

    #[error("stage input missing: {message}")]
    StageInput {
        message: String,
        pending: Vec<Trajectory>,
    },

    #[error("cannot split: {0}")]
    Split(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("{}: {}", x.path, x.message))
        .collect::<Vec<_>>()
        .join("; ")
}

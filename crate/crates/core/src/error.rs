use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoverageError {
    #[error("malformed coverage key `{0}`")]
    MalformedKey(String),
    #[error("feedback invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("unknown target `{0}` (expected mini-calc or mini-json)")]
    UnknownTarget(String),
    #[error("time limit must be positive")]
    InvalidTimeLimit,
    #[error("adapter failure: {0}")]
    AdapterFailure(String),
    #[error("coverage export does not match schema: {0}")]
    SchemaMismatch(String),
    #[error("function `{0}` is not in the program index")]
    UnknownFunction(String),
    #[error("invalid program index: {0}")]
    InvalidIndex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SliceError {
    #[error("target function `{0}` is missing from the program index")]
    TargetFunctionMissing(String),
    #[error("prompt budget {budget} is below the minimum {required} characters")]
    BudgetTooSmall { budget: usize, required: usize },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("seed corpus is empty")]
    NoSeeds,
    #[error("sampling cap must be at least 1")]
    InvalidCap,
    #[error("no questions could be constructed from {seeds} seed(s)")]
    NoQuestions { seeds: usize },
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("{path}:{line}: record does not match schema: {reason}")]
    SchemaMismatch {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("original trace is empty")]
    EmptyOriginalTrace,
    #[error("original run does not reach {0} with the observed outcome")]
    InconsistentOriginal(String),
    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Target(#[from] TargetError),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("malformed model response: {0}")]
    MalformedResponse(String),
    #[error("cannot load script: {0}")]
    Script(String),
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid campaign config: {0}")]
    ConfigInvalid(String),
    #[error("no completion contained a fenced block")]
    ExtractionFailure,
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("record {record} targets `{target}`, which was not supplied")]
    UnknownTarget { record: String, target: String },
    #[error(transparent)]
    Slice(#[from] SliceError),
}

use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch at {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("probabilities do not sum to one (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("Hessian capacity exceeded: {params} parameters, cap is {cap}")]
    CapacityExceeded { params: usize, cap: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("mask allocation exhausted: task {task} needs {requested} indices, {remaining} remain")]
    AllocationExhausted {
        task: usize,
        requested: usize,
        remaining: usize,
    },

    #[error("incompatible network for {algorithm}: {reason}")]
    IncompatibleNetwork {
        algorithm: &'static str,
        reason: String,
    },

    #[error("missing ledger entry (checkpoint {checkpoint}, task {task})")]
    MissingEntry { checkpoint: usize, task: usize },

    #[error("missing curvature for task {0}")]
    MissingHessian(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined score: {0}")]
    Undefined(String),

    #[error("matrix is not positive semi-definite (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    NotPsd { min_eig: f64, max_eig: f64 },

    #[error("malformed IDX file at byte {offset}: {reason}")]
    MalformedIdx { offset: usize, reason: String },

    #[error("indivisible class split: {classes} classes, {per_task} per task")]
    IndivisibleSplit { classes: usize, per_task: usize },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

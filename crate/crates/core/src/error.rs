//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

use crate::prompts::GroupId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // schema registry
    #[error("task `{0}` is already registered with different content")]
    DuplicateTask(String),
    #[error("invalid schema for `{task}`: {}", violations.join("; "))]
    InvalidSchema { task: String, violations: Vec<String> },
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
    #[error("task `{0}` is listed as both a training and an evaluation task")]
    OverlapError(String),
    #[error("taxonomy references unregistered task `{0}`")]
    UnknownTask(String),

    // prompt store
    #[error("prompt group {0} already exists")]
    DuplicateGroup(GroupId),
    #[error("prompt group {0} does not exist")]
    UnknownGroup(GroupId),
    #[error("selector matched no prompt group")]
    EmptySelector,
    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    // composer
    #[error("instance of `{task}` is missing component `{key}`")]
    MissingComponent { task: String, key: String },
    #[error("instance of `{task}` has component `{key}` not declared by its schema")]
    UndeclaredComponent { task: String, key: String },
    #[error("component `{key}` has the wrong value kind for its declaration")]
    ValueKindMismatch { key: String },
    #[error("prompt slots need {needed} positions but the budget is {max_len}")]
    TokenBudgetExceeded { needed: usize, max_len: usize },

    // ingestion
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("encoding error in {}: {reason}", path.display())]
    EncodingError { path: PathBuf, reason: String },
    #[error("no dataset spec for training task `{0}`")]
    MissingSpec(String),
    #[error("template for `{task}` references unresolved placeholder `{placeholder}`")]
    UnresolvedPlaceholder { task: String, placeholder: String },
    #[error("{count} templates given; at most {max} allowed")]
    TooManyTemplates { count: usize, max: usize },

    // model harness
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NaNLoss { step: u64, detail: String },
    #[error("training mixture is empty")]
    EmptyMixture,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // evaluation
    #[error("option ranking needs at least two options, got {0}")]
    EmptyOptions(usize),
    #[error("pre-trained prompt group {0} is missing from the checkpoint")]
    MissingGroup(GroupId),
    #[error("metric {metric} does not fit task `{task}` of format `{format}`")]
    MetricMismatch {
        task: String,
        format: String,
        metric: String,
    },
    #[error("checkpoint was pre-trained with ablation {found} but {requested} was requested")]
    AblationMismatch { found: String, requested: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

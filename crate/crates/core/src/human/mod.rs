//! Human listening benchmark: pair assignment, verdict collection and the
//! analytics that turn 5-point verdicts into EER, AUROC and accuracy.

mod metrics;
mod service;
mod store;

use std::path::PathBuf;

use thiserror::Error;

pub use metrics::{
    binary_accuracy, eer_auroc_from_roc, interpolated_roc, model_accuracy, model_accuracy_threshold, Judgment,
    RocCurve, RocPoint,
};
pub use service::{
    Ack, BenchmarkPair, BenchmarkService, BenchmarkSet, Progress, Side, SubsetMetrics, Submission, TaskDescriptor,
    GRACE_S, TIME_LIMIT_S,
};
pub use store::{AnnotationRecord, RecordStore, StoredEvent};

#[derive(Error, Debug)]
pub enum HumanError {
    #[error("score {0} is outside 1..=5")]
    InvalidScore(i64),
    #[error("elapsed time {0} is not a non-negative number of seconds")]
    InvalidElapsed(f64),
    #[error("need both classes, got {n_same} same and {n_diff} different")]
    DegenerateLabels { n_same: usize, n_diff: usize },
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("no unclaimed subset is left for annotator {0}")]
    SubsetExhausted(String),
    #[error("pair {pair_id} already has a different answer from {annotator_id}")]
    DuplicateAnnotation { pair_id: String, annotator_id: String },
    #[error("pair {pair_id} is not assigned to {annotator_id}")]
    NotAssigned { pair_id: String, annotator_id: String },
    #[error("unknown pair {0}")]
    UnknownPair(String),
    #[error("unknown subset {0}")]
    UnknownSubset(String),
    #[error("invalid annotator id {0:?}")]
    InvalidAnnotator(String),
    #[error("invalid benchmark set: {0}")]
    InvalidSet(String),
    #[error("record store {} is damaged at line {line}", path.display())]
    CorruptStore { path: PathBuf, line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

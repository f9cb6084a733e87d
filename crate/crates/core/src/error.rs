use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid spacing: {0}")]
    InvalidSpacing(String),
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
    #[error("invalid detection: confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("cohort has no ground-truth boxes")]
    NoGroundTruth,
    #[error("cohort has no subjects")]
    NoSubjects,
    #[error("k-means needs at least {k} boxes, got {got}")]
    TooFewBoxes { k: usize, got: usize },
    #[error("anchor count mismatch: have {expected}, got {got}")]
    AnchorCountMismatch { expected: usize, got: usize },
    #[error("no subjects to average over")]
    EmptySubjectList,
    #[error("round {round} outside 1..={rounds}")]
    RoundOutOfRange { round: usize, rounds: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("could not place lesion {lesion} of subject {subject} after {tries} attempts")]
    Placement {
        subject: String,
        lesion: usize,
        tries: usize,
    },
    #[error("subject id mismatch; orphans: {0:?}")]
    SubjectMismatch(Vec<String>),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("unsupported {kind} format version {found} (supported major {supported})")]
    Version {
        kind: String,
        found: String,
        supported: u32,
    },
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ResumeMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

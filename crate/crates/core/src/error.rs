use std::fmt;

use crate::model::Phase;

/// Errors surfaced by the middleware, the backends and the document loader.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{op} is not allowed in phase {phase}")]
    Phase { op: &'static str, phase: Phase },

    #[error("unknown {kind} {id}")]
    Unknown { kind: &'static str, id: String },

    #[error("task {task}: missing mandatory field `{field}`")]
    MissingField { task: String, field: &'static str },

    #[error("version props mismatch: expected {expected} variant, got {got}")]
    VariantMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("channel {0} is already connected")]
    ChannelConnected(String),

    #[error("task graph contains a cycle through task {0}")]
    Cycle(String),

    #[error("version selection failed for task {task}: {reason}")]
    Selection { task: String, reason: String },

    #[error("user selector contract violation for task {task}: returned {version}, not eligible")]
    Contract { task: String, version: String },

    #[error("inconsistent SDF rates on edge {edge}")]
    Inconsistent { edge: String },

    #[error("SDF graph deadlocks: no fireable actor ({0})")]
    Deadlock(String),

    #[error("schedule table: {0}")]
    Table(String),

    #[error("hyperperiod overflows; an explicit horizon in ns is required")]
    HorizonRequired,

    #[error("{0}")]
    Usage(String),

    #[error("re-entrant lock acquisition")]
    Reentrant,

    #[error("trace integrity: {0}")]
    Integrity(String),

    #[error("internal: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn unknown(kind: &'static str, id: impl fmt::Display) -> Self {
        Error::Unknown {
            kind,
            id: id.to_string(),
        }
    }
}

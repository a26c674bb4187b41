//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("network contains a cycle (|lines| must equal |buses| - 1 on a tree)")]
    CycleDetected,
    #[error("network is not connected: bus {0} unreachable from the root")]
    Disconnected(u32),
    #[error("multiple root buses declared")]
    MultipleRoots,
    #[error("no root bus declared")]
    NoRoot,
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("line references unknown bus {0}")]
    UnknownBus(u32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("solver hit the iteration cap")]
    MaxIterations,
    #[error("solver failed on ill-conditioned data: {0}")]
    IllConditioned(String),
    #[error("EV session {ev_id} infeasible: {reason}")]
    InfeasibleSession { ev_id: u32, reason: String },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("profile horizon mismatch: file has {found} steps, expected {expected} (or an integer multiple)")]
    WrongHorizon { found: usize, expected: usize },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

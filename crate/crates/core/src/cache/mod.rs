//! The GPU-side Sparse Memory Pool and trace replay.

mod pool;
mod replay;

pub use pool::{AccessResult, PoolStats, SparsePool};
pub use replay::{
    pool_capacity, read_layer_means, replay, replay_batch, replay_layer, MissProfile, WarmStart,
};

use thiserror::Error;

use crate::trace::TraceError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("pool capacity must be at least 1")]
    ZeroCapacity,
    #[error("requested ids not strictly increasing at position {position}")]
    NotSorted { position: usize },
    #[error("entry {0} already present in pool history")]
    DuplicateId(u32),
    #[error("sparse ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("trace has no prefill windows to warm up from")]
    MissingWindows,
    #[error("batch replay needs at least one trace")]
    EmptyBatch,
    #[error("request {request} has a different trace shape")]
    ShapeMismatch { request: usize },
    #[error("miss profile has no rows for layer {0}")]
    MissingLayer(usize),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for CacheError {
    fn from(e: csv::Error) -> Self {
        Self::Csv(e.to_string())
    }
}

impl From<std::io::Error> for CacheError {
    fn from(e: std::io::Error) -> Self {
        Self::Csv(e.to_string())
    }
}

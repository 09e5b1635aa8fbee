//! Confidence-bounded best-arm search over combinatorial template spaces.

pub mod batching;
pub mod bounds;
pub mod config;
pub mod expr;
pub mod optimizer;
pub mod oracle;
pub mod presets;
pub mod report;
pub mod rng;
pub mod runner;
pub mod space;
pub mod surrogate;
pub mod trace;
pub mod verify;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the process exit codes used by
/// the `coup` binary: configuration problems exit 2, oracle backend problems
/// exit 3, verification failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("expression error: {0}")]
    Expr(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("oracle backend error: {0}")]
    Backend(String),
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

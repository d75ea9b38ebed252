//! Deterministic CPU implementation of cooperative sentiment agents for
//! multimodal sentiment analysis and emotion recognition.
//!
//! The pipeline disentangles each modality into sentiment and modality
//! features, reconstructs sentiment dynamics through cross-correlation
//! phase-space reconstruction, and learns per-frame fusion weights with
//! cooperating actor-critic agents scored by a joint transformer-style
//! critic. A synthetic data generator, training harness, metrics, and
//! diagnostics make the whole system runnable on one CPU core.

pub mod agents;
pub mod config;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod dpsr;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod module;
pub mod msd;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use tensor::{Scalar, Tensor};

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum CosaError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CosaError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CosaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error reflects bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CosaError::Shape(_) | CosaError::Config(_) | CosaError::Format(_) | CosaError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CosaError>;

//! Long-tailed fine-tuning of a small transformer encoder with semantic-guided
//! adapters, a compensated logit-adjusted loss, and feature-interchange logits.
//!
//! All math is float64 with hand-written backward passes; [`gradcheck`]
//! verifies each of them against central finite differences.

pub mod analysis;
pub mod data;
pub mod encoder;
pub mod gradcheck;
pub mod heads;
pub mod loss;
pub mod params;
pub mod rng;
pub mod sg_adapter;
pub mod snapshot;
pub mod tensor;
pub mod trainer;

pub use params::ParamSet;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    NonFinite(String),
    #[error("invalid value: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    TrainingAborted(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! The context-fused classifier: patch encoders, cross-attention fusion,
//! auxiliary level heads and the terminal classifier.

mod attention;
pub mod checkpoint;
mod encoder;
pub mod layers;
pub mod loss;
mod mceam;
mod network;
pub mod params;

use thiserror::Error;

pub use attention::{softmax_rows, MultiHeadAttention};
pub use encoder::{EncoderConfig, EncoderOutput, PatchEncoder};
pub use mceam::{CrossAttentionStack, FusionCache, Mceam};
pub use network::{AttentionMaps, LossBreakdown, Matanet, ModelConfig, Prediction, Stream, Targets};
pub use params::{Grads, ParamId, ParamStore};

use crate::roi_context::ContextScale;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model expects context scales {expected:?}, got {got} context streams")]
    ScaleMismatch { expected: Vec<ContextScale>, got: usize },
    #[error("target index {target} out of range for a head with {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("expected {expected} level targets, got {got}")]
    LevelCount { expected: usize, got: usize },
    #[error("non-finite loss (cls {cls}, hier {hier})")]
    NonFinite { cls: f64, hier: f64 },
    #[error("invalid model config: {0}")]
    Config(String),
}

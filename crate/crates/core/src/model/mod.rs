//! The retrieval transformer: per-observation tokenization, masked
//! self-attention across observations, task heads, loss, and exact
//! reverse-mode gradients.

mod backward;
mod config;
mod episode;
mod forward;
mod mask;
mod params;

pub use backward::backward;
pub use config::ModelConfig;
pub use episode::Episode;
pub use forward::{argmax_row, embed_tokens, forward, loss, predict_proba, Output};
pub use mask::{build_mask, build_mask_opts, AttentionMask};
pub use params::{
    expected_shapes, AttentionParams, FeedForwardParams, LayerNormParams, LayerParams, ModelParams,
    TensorMut, TensorRef,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("tensor {tensor} has shape {found}, expected {expected}")]
    ShapeMismatch { tensor: String, expected: String, found: String },
}

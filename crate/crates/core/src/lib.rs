//! Retrieval-based tabular transformer at desk scale.
//!
//! A small transformer predicts query labels conditioned on an in-context
//! support set of labeled observations. The crate covers the full pipeline:
//! CSV ingestion, quantile preprocessing, the masked-attention model with
//! exact gradients, synthetic prior generation for pretraining, the three
//! training regimes (pretrain / fine-tune / scratch), full-context and
//! ensembled inference, and a variant-comparison benchmark harness.
//!
//! All numeric kernels are generic over the scalar type (f32 or f64) via
//! [`scalar::Scalar`]; concrete aliases live at the crate root.

pub mod bench;
pub mod checkpoint;
pub mod dataio;
pub mod infer;
pub mod model;
pub mod preprocess;
pub mod prior;
pub mod rng;
pub mod scalar;
pub mod train;

pub use dataio::{Dataset, SplitSpec, TaskKind};
pub use model::{Episode, ModelConfig, ModelParams};
pub use preprocess::{PreprocessState, ProcessedMatrix, QuantileMap, Targets};

/// Single-precision aliases (default for training speed).
pub type ModelParams32 = model::ModelParams<f32>;
pub type Episode32 = model::Episode<f32>;
pub type PreprocessState32 = preprocess::PreprocessState<f32>;
pub type ProcessedMatrix32 = preprocess::ProcessedMatrix<f32>;
pub type QuantileMap32 = preprocess::QuantileMap<f32>;

/// Double-precision aliases (used by tolerance-sensitive checks).
pub type ModelParams64 = model::ModelParams<f64>;
pub type Episode64 = model::Episode<f64>;
pub type PreprocessState64 = preprocess::PreprocessState<f64>;
pub type ProcessedMatrix64 = preprocess::ProcessedMatrix<f64>;
pub type QuantileMap64 = preprocess::QuantileMap<f64>;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::dataio::{TaskKind, DEFAULT_MAX_FEATURES, MAX_CLASSES};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub feedforward_dim: usize,
    #[serde(default = "default_max_features")]
    pub max_features: usize,
    #[serde(default = "default_max_classes")]
    pub max_classes: usize,
    pub task: TaskKind,
    /// Whether inference tokens attend themselves in addition to the support
    /// block. Ablation flag; the default matches the reference semantics.
    #[serde(default = "default_true")]
    pub query_self_attend: bool,
}

fn default_max_features() -> usize {
    DEFAULT_MAX_FEATURES
}

fn default_max_classes() -> usize {
    MAX_CLASSES
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Desk-scale defaults for a task kind.
    pub fn new(task: TaskKind) -> Self {
        Self {
            hidden_dim: 256,
            n_layers: 4,
            n_heads: 4,
            feedforward_dim: 512,
            max_features: DEFAULT_MAX_FEATURES,
            max_classes: MAX_CLASSES,
            task,
            query_self_attend: true,
        }
    }

    pub fn head_width(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.max_classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.n_layers == 0 || self.n_heads == 0 || self.feedforward_dim == 0 {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.max_features == 0 {
            return Err(ModelError::InvalidConfig("max_features must be positive".into()));
        }
        if self.task == TaskKind::Classification && (self.max_classes == 0 || self.max_classes > MAX_CLASSES) {
            return Err(ModelError::InvalidConfig(format!(
                "max_classes must lie in 1..={MAX_CLASSES}, got {}",
                self.max_classes
            )));
        }
        Ok(())
    }
}

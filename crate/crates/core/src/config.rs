//! Run configuration read from a single JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, Provider};
use crate::tensor::AdamWConfig;
use crate::train::TrainOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_model: usize,
    pub max_len: usize,
    pub top_k: usize,
    pub num_heads: usize,
    pub labels: Vec<String>,
    pub provider: Provider,
    pub lexicon: Option<PathBuf>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub early_stopping: bool,
    pub patience: usize,
    pub class_weighting: bool,
    pub flatten_threads: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainOptions::default();
        let opt = AdamWConfig::default();
        Self {
            d_model: model.d_model,
            max_len: model.max_len,
            top_k: model.top_k,
            num_heads: model.num_heads,
            labels: model.labels,
            provider: model.provider,
            lexicon: model.lexicon,
            learning_rate: opt.learning_rate,
            adam_beta1: opt.beta1,
            adam_beta2: opt.beta2,
            adam_eps: opt.eps,
            weight_decay: opt.weight_decay,
            batch_size: train.batch_size,
            epochs: train.epochs,
            dropout: model.dropout,
            early_stopping: train.early_stopping,
            patience: train.patience,
            class_weighting: train.class_weighting,
            flatten_threads: false,
            seed: train.seed,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Checks the training fields; model fields are checked by
    /// [`ModelConfig::validate`].
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} {b} outside [0, 1)"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err("batch_size and epochs must be positive".into());
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            max_len: self.max_len,
            top_k: self.top_k,
            num_heads: self.num_heads,
            dropout: self.dropout,
            labels: self.labels.clone(),
            provider: self.provider.clone(),
            lexicon: self.lexicon.clone(),
        }
    }

    pub fn training(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                learning_rate: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            early_stopping: self.early_stopping,
            patience: self.patience,
            class_weighting: self.class_weighting,
            seed: self.seed,
        }
    }
}

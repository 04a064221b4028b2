//! Mini-batch AdamW training with early stopping on validation macro-F1.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{confusion, macro_metrics, EvaluationReport};
use crate::fusion::{argmax, inverse_frequency_weights};
use crate::model::{Model, ModelError, PreparedPair};
use crate::rng::{stream, Stream};
use crate::tensor::{AdamW, AdamWConfig, Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub early_stopping: bool,
    pub patience: usize,
    pub class_weighting: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            early_stopping: true,
            patience: 3,
            class_weighting: false,
            seed: 0,
        }
    }
}

/// One labeled, prepared pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pair: PreparedPair,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Inference-mode loss and metrics over `samples`.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<(f64, EvaluationReport, Vec<usize>), ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Input("no examples to evaluate".into()));
    }
    let pairs: Vec<PreparedPair> = samples.iter().map(|s| s.pair.clone()).collect();
    let probs = model.predict(&pairs)?;
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(samples.len());
    for (p, s) in probs.iter().zip(samples) {
        total -= p[s.target].max(crate::fusion::PROB_FLOOR).ln();
        preds.push(argmax(p));
    }
    let truths: Vec<usize> = samples.iter().map(|s| s.target).collect();
    let cm = confusion(&preds, &truths, model.labels.len()).map_err(|e| ModelError::Input(e.to_string()))?;
    Ok((total / samples.len() as f64, macro_metrics(&cm, model.labels.names()), preds))
}

fn is_divergence(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::Tensor(TensorError::NonFinite { .. } | TensorError::NanGradient { .. })
    )
}

/// Trains in place. With early stopping the best validation parameters are
/// restored at the end; training stops once the monitored metric has failed
/// to improve for more than `patience` consecutive epochs.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainSummary, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Invalid("training set is empty".into()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(TrainError::Invalid("batch_size and epochs must be positive".into()));
    }
    if opts.early_stopping && val_set.is_empty() {
        return Err(TrainError::Invalid("early stopping needs a validation set".into()));
    }
    let labels = model.labels.len();
    let targets: Vec<usize> = train_set.iter().map(|s| s.target).collect();
    if let Some(&t) = targets.iter().find(|&&t| t >= labels) {
        return Err(TrainError::Invalid(format!("label index {t} out of range")));
    }
    let weights = opts.class_weighting.then(|| inverse_frequency_weights(&targets, labels));
    let mut optimizer = AdamW::new(opts.optimizer, &model.params).map_err(ModelError::from)?;
    let mut shuffle_rng = stream(opts.seed, Stream::Shuffle);
    let mut dropout_rng = stream(opts.seed, Stream::Dropout);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut logs = Vec::new();
    let mut best: Option<(f64, usize, crate::tensor::ParamStore)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch: Vec<&PreparedPair> = chunk.iter().map(|&i| &train_set[i].pair).collect();
            let tgt: Vec<usize> = chunk.iter().map(|&i| train_set[i].target).collect();
            let diverged = |e: ModelError| {
                if is_divergence(&e) {
                    TrainError::Divergence {
                        epoch,
                        batch: b + 1,
                        detail: e.to_string(),
                    }
                } else {
                    TrainError::Model(e)
                }
            };
            let grads = {
                let mut g = Graph::new();
                let (loss, _) = model
                    .loss(&mut g, &batch, &tgt, weights.as_deref(), true, &mut dropout_rng)
                    .map_err(diverged)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainError::Divergence {
                        epoch,
                        batch: b + 1,
                        detail: format!("loss {value}"),
                    });
                }
                loss_sum += value * chunk.len() as f64;
                g.backward(loss).map_err(|e| diverged(e.into()))?
            };
            optimizer
                .step(&mut model.params, &grads)
                .map_err(|e| diverged(e.into()))?;
            if model.params.iter().any(|(_, _, t)| !t.is_finite()) {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: "non-finite parameter after update".into(),
                });
            }
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, val_accuracy, val_macro_f1) = if val_set.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let (l, r, _) = evaluate(model, val_set)?;
            (l, r.accuracy, r.macro_avg.f1)
        };
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            val_macro_f1,
        };
        on_epoch(&log);
        logs.push(log);
        if !opts.early_stopping {
            continue;
        }
        if best.as_ref().is_none_or(|(f1, _, _)| val_macro_f1 > *f1) {
            best = Some((val_macro_f1, epoch, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > opts.patience {
                stopped_early = epoch < opts.epochs;
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => logs.len(),
    };
    Ok(TrainSummary {
        epochs: logs,
        best_epoch,
        stopped_early,
    })
}

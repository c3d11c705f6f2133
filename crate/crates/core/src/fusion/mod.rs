//! Multimodal emotion recognition: per-modality projection to a shared space,
//! query-based attention fusion, a linear classification head, and a
//! mini-batch SGD training loop with hand-derived gradients.

mod matrix;
mod model;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use matrix::{softmax, Matrix};
pub use model::{argmax_label, ForwardPass, FusionModel, Mode, Projection};

use crate::corpus::{EmotionLabel, UtteranceKey};
use crate::features::{AlignedDataset, Example, Modality};
use crate::metrics::ConfusionMatrix;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("example {0} has no gold label")]
    MissingLabel(UtteranceKey),
    #[error("empty {0} set")]
    EmptyData(&'static str),
    #[error("training diverged (non-finite loss or parameters) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("checkpoint encoding: {0}")]
    Checkpoint(serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub common_dim: usize,
    pub dropout_rate: f64,
    pub class_count: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            common_dim: 128,
            dropout_rate: 0.1,
            class_count: EmotionLabel::COUNT,
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let fail = |msg: String| Err(FusionError::Config(msg));
        if self.common_dim == 0 {
            return fail("common_dim must be at least 1".into());
        }
        if self.class_count != EmotionLabel::COUNT {
            return fail(format!("class_count must be 7, got {}", self.class_count));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        Ok(())
    }
}

pub fn init_model(
    config: &FusionConfig,
    input_dims: &BTreeMap<Modality, usize>,
) -> Result<FusionModel, FusionError> {
    FusionModel::init(config, input_dims)
}

/// `-log softmax(logits)[label]`, computed with log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: EmotionLabel) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    log_total - logits[label.index()]
}

/// Mean cross-entropy over the batch and its gradient for every parameter.
pub fn loss_and_grads<R: Rng + ?Sized>(
    model: &FusionModel,
    batch: &[&Example],
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, FusionModel), FusionError> {
    if batch.is_empty() {
        return Err(FusionError::EmptyData("batch"));
    }
    let n = batch.len() as f64;
    let mut grads = model.zeros_like();
    let mut loss = 0.0;
    for example in batch {
        let label = example
            .label
            .ok_or_else(|| FusionError::MissingLabel(example.key.clone()))?;
        let pass = model.forward(example, mode, rng)?;
        loss += cross_entropy(&pass.logits, label);
        let mut logit_grad = softmax(&pass.logits);
        logit_grad[label.index()] -= 1.0;
        logit_grad.iter_mut().for_each(|g| *g /= n);
        model.backward(example, &pass, &logit_grad, &mut grads);
    }
    Ok((loss / n, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_weighted_f1: f64,
    pub dev_weighted_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (highest dev F1, earliest on ties).
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["epoch", "loss", "train_weighted_f1", "dev_weighted_f1"])?;
        for r in &self.epochs {
            out.write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                r.train_weighted_f1.to_string(),
                r.dev_weighted_f1.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Mini-batch SGD with a fixed learning rate and seeded shuffling. Returns the
/// parameters from the epoch with the best dev weighted F1.
pub fn train(
    model: FusionModel,
    train_set: &AlignedDataset,
    dev_set: &AlignedDataset,
    config: &FusionConfig,
) -> Result<(FusionModel, TrainingHistory), FusionError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(FusionError::EmptyData("train"));
    }
    if dev_set.is_empty() {
        return Err(FusionError::EmptyData("dev"));
    }
    if let Some(ex) = train_set.examples.iter().find(|e| e.label.is_none()) {
        return Err(FusionError::MissingLabel(ex.key.clone()));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let mut model = model;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, FusionModel)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set.examples[i]).collect();
            let (loss, grads) = loss_and_grads(&model, &batch, Mode::Train, &mut dropout_rng)?;
            let diverged = FusionError::Divergence {
                epoch,
                batch: batch_index + 1,
            };
            if !loss.is_finite() {
                return Err(diverged);
            }
            model.add_scaled(-config.learning_rate, &grads);
            if !model.is_finite() {
                return Err(diverged);
            }
            epoch_loss += loss * chunk.len() as f64;
        }

        let train_f1 = weighted_f1(&model, train_set)?;
        let dev_f1 = weighted_f1(&model, dev_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            loss: epoch_loss / train_set.len() as f64,
            train_weighted_f1: train_f1,
            dev_weighted_f1: dev_f1,
        });
        if best.as_ref().is_none_or(|(f1, _)| dev_f1 > *f1) {
            history.best_epoch = epoch;
            best = Some((dev_f1, model.clone()));
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, history))
}

/// Utterance-level weighted F1 of the model's predictions on labeled examples.
pub fn weighted_f1(model: &FusionModel, dataset: &AlignedDataset) -> Result<f64, FusionError> {
    let predictions = predict(model, dataset)?;
    let matrix = ConfusionMatrix::from_pairs(
        dataset
            .examples
            .iter()
            .zip(&predictions)
            .filter_map(|(ex, p)| ex.label.map(|gold| (gold, p.predicted))),
    );
    Ok(matrix.weighted_f1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionPrediction {
    #[serde(flatten)]
    pub key: UtteranceKey,
    pub probabilities: Vec<f64>,
    pub predicted: EmotionLabel,
    pub attention: BTreeMap<Modality, f64>,
}

/// Eval-mode predictions, one per example, in dataset order.
pub fn predict(
    model: &FusionModel,
    dataset: &AlignedDataset,
) -> Result<Vec<EmotionPrediction>, FusionError> {
    dataset
        .examples
        .par_iter()
        .map(|example| {
            // Eval mode never draws from the rng.
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let pass = model.forward(example, Mode::Eval, &mut rng)?;
            Ok(EmotionPrediction {
                key: example.key.clone(),
                probabilities: softmax(&pass.logits),
                predicted: argmax_label(&pass.logits),
                attention: pass.attention,
            })
        })
        .collect()
}

pub fn write_predictions<W: Write>(
    predictions: &[EmotionPrediction],
    mut writer: W,
) -> std::io::Result<()> {
    for p in predictions {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<EmotionPrediction>, String> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", n + 1))?);
    }
    Ok(out)
}

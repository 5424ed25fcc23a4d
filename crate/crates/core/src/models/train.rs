use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::ad::{adam_step, AdError, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::data::Samples;

/// Mini-batch Adam with early stopping on a held-out slice of the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    /// Rescales each batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1000,
            patience: 20,
            min_delta: 1e-4,
            batch_size: 64,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.max_epochs > 0
            && self.patience > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.min_delta >= 0.0
            && (0.0..1.0).contains(&self.holdout_fraction)
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub best_validation_loss: f64,
    /// Mean validation loss after every epoch.
    pub validation_history: Vec<f64>,
    /// Model-specific scores (accuracies, mean log densities).
    pub train_score: f64,
    pub validation_score: f64,
}

/// A fitted model together with its training record.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub report: TrainReport,
}

pub(crate) trait Trainable: Clone {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Mean loss of the batch with the model tensors bound as `params`.
    fn batch_loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: &Tensor, y: &[usize]) -> Result<Var<'t>, AdError>;
}

pub(crate) fn mean_loss<M: Trainable>(model: &M, data: &Samples) -> Result<f64, AdError> {
    let tape = Tape::new();
    let params: Vec<Var> = model.params().into_iter().map(|t| tape.constant(t.clone())).collect();
    Ok(model.batch_loss(&tape, &params, &data.x, &data.y)?.item())
}

/// Splits off a shuffled validation slice (at least one row when the fraction is positive).
pub(crate) fn holdout_split(data: &Samples, fraction: f64, rng: &mut ChaCha8Rng) -> (Samples, Samples) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let n_val = if fraction > 0.0 && data.len() > 1 {
        ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len() - 1)
    } else {
        0
    };
    let (val, train) = idx.split_at(n_val);
    (data.subset(train), data.subset(val))
}

fn clip_global_norm(grads: Vec<Tensor>, limit: f64) -> Vec<Tensor> {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm <= limit {
        return grads;
    }
    let c = limit / norm;
    grads.into_iter().map(|g| g.map_indexed(|_, v| v * c)).collect()
}

/// Fits `model` in place and returns the training record. Parameters are
/// restored to the epoch with the lowest validation loss.
pub(crate) fn fit<M: Trainable>(model: &mut M, data: &Samples, cfg: &TrainConfig) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val) = holdout_split(data, cfg.holdout_fraction, &mut rng);
    let monitor = if val.is_empty() { &train } else { &val };
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut state = AdamState::new(&model.params());

    let mut report = TrainReport {
        initial_train_loss: mean_loss(model, &train)?,
        best_validation_loss: f64::INFINITY,
        ..TrainReport::default()
    };
    let mut best = model.clone();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let bx = train.x.select_rows(batch);
            let by: Vec<usize> = batch.iter().map(|&i| train.y[i]).collect();
            let grads = {
                let tape = Tape::new();
                let params: Vec<Var> = model.params().into_iter().map(|t| tape.param(t.clone())).collect();
                let loss = model.batch_loss(&tape, &params, &bx, &by)?;
                tape.backward(loss)?;
                params
                    .iter()
                    .map(|p| p.grad().expect("parameter leaf"))
                    .collect::<Vec<_>>()
            };
            let grads = match cfg.grad_clip {
                Some(limit) => clip_global_norm(grads, limit),
                None => grads,
            };
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam_step(&mut model.params_mut(), &grad_refs, &mut state, &adam);
        }
        let v = mean_loss(model, monitor)?;
        report.validation_history.push(v);
        report.epochs_run = epoch + 1;
        if v < report.best_validation_loss - cfg.min_delta {
            report.best_validation_loss = v;
            report.best_epoch = epoch + 1;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *model = best;
    report.best_validation_loss = report.best_validation_loss.min(mean_loss(model, monitor)?);
    report.final_train_loss = mean_loss(model, &train)?;
    log::debug!(
        "fit: {} epochs, best epoch {}, validation loss {:.5}",
        report.epochs_run,
        report.best_epoch,
        report.best_validation_loss
    );
    Ok(report)
}

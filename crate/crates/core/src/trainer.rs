//! BCE training with AdamW and a one-cycle schedule, plus accuracy
//! evaluation for models and oracles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{IclModel, ModelConfig, ModelError};
use crate::oracle::{bayes_predict, episode_llr};
use crate::taskgen::{streams, Episode, EpisodeSource, TaskGenError};
use crate::{Param, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate of the one-cycle schedule.
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Episodes per optimizer step.
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Fresh episodes for the final validation estimate.
    pub eval_episodes: usize,
    /// Fresh episodes for the cheaper per-epoch validation curve.
    pub epoch_eval_episodes: usize,
    /// Seeds a multi-seed experiment runs over.
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            batch: 64,
            epochs: 20,
            steps_per_epoch: 150,
            eval_episodes: 2000,
            epoch_eval_episodes: 500,
            seeds: vec![1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Stable binary cross-entropy on a pre-sigmoid logit.
pub fn bce_loss(logit: f64, y: u8) -> f64 {
    logit.max(0.0) - logit * y as f64 + (-logit.abs()).exp().ln_1p()
}

/// One-cycle learning rate: linear warmup from `lr_max / 25` over the first
/// 30% of steps, then cosine annealing down to `lr_max / 1e4`.
pub fn onecycle_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    assert!(step < total_steps, "step {step} out of range 0..{total_steps}");
    let start = lr_max / 25.0;
    let end = lr_max / 1e4;
    let warmup = ((total_steps as f64 * 0.3) as usize).max(1);
    if step < warmup {
        start + (lr_max - start) * step as f64 / warmup as f64
    } else {
        let span = (total_steps - 1 - warmup).max(1);
        let u = (step - warmup) as f64 / span as f64;
        end + (lr_max - end) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

/// First/second moment buffers for AdamW, one pair per parameter.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// Frozen parameters are untouched.
pub fn adamw_step(params: &mut [&mut Param], state: &mut AdamState, cfg: &TrainConfig, lr: f64) {
    assert_eq!(params.len(), state.m.len(), "optimizer state shape mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    const EPS: f64 = 1e-8;
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let grad = p.grad.data();
        let decay = 1.0 - lr * cfg.weight_decay;
        for ((w, &g), (mi, vi)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *w *= decay;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Per-step training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Sign-match accuracy on this training batch.
    pub batch_acc: f64,
}

/// Per-epoch summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-batch accuracy over the epoch.
    pub train_acc: f64,
    /// Accuracy on fresh validation episodes.
    pub val_acc: f64,
}

/// Everything a single-seed run produces besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Mean training-batch accuracy over the final epoch.
    pub final_train_acc: f64,
    /// Final validation accuracy with binomial 95% half-width.
    pub final_val_acc: f64,
    pub final_val_ci: f64,
}

/// Anything that turns episodes into decision scores (positive => class 1).
pub trait Classifier {
    fn score_batch(&self, episodes: &[Episode]) -> Result<Vec<f64>, TrainError>;
}

impl Classifier for IclModel {
    fn score_batch(&self, episodes: &[Episode]) -> Result<Vec<f64>, TrainError> {
        Ok(self.forward_batch(episodes)?.logit_vec())
    }
}

/// The Bayes oracle as a classifier: scores with the true-parameter LLR.
pub struct OracleClassifier;

impl Classifier for OracleClassifier {
    fn score_batch(&self, episodes: &[Episode]) -> Result<Vec<f64>, TrainError> {
        Ok(episodes.iter().map(episode_llr).collect())
    }
}

/// Sign-match accuracy of a classifier over fresh episodes from `source`,
/// with a binomial-normal 95% half-width. Episodes are drawn from the
/// (seed, stream_base) lane so repeated calls see identical data.
pub fn evaluate(
    classifier: &impl Classifier,
    source: &EpisodeSource,
    n_episodes: usize,
    seed: u64,
    stream_base: u64,
) -> Result<(f64, f64), TrainError> {
    assert!(n_episodes >= 100, "evaluation needs at least 100 episodes");
    let mut correct = 0usize;
    let mut done = 0usize;
    const CHUNK: usize = 64;
    while done < n_episodes {
        let count = CHUNK.min(n_episodes - done);
        let eps = source.sample_batch(seed, stream_base, done as u64, count)?;
        let scores = classifier.score_batch(&eps)?;
        for (ep, &s) in eps.iter().zip(&scores) {
            if bayes_predict(s) == ep.query_y {
                correct += 1;
            }
        }
        done += count;
    }
    let p = correct as f64 / n_episodes as f64;
    let half = 1.96 * (p * (1.0 - p) / n_episodes as f64).sqrt();
    Ok((p, half))
}

/// Observer hook invoked at each epoch boundary (checkpointing, logging).
pub struct EpochEvent<'a> {
    pub epoch: usize,
    pub model: &'a IclModel,
    pub record: &'a EpochRecord,
}

/// Train a fresh model on episodes streamed from `source`.
///
/// Fully deterministic given (configs, source, seed): episode streams are
/// derived from the seed, and the step loop is strictly sequential.
pub fn train(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    source: &EpisodeSource,
    seed: u64,
) -> Result<(IclModel, RunMetrics), TrainError> {
    train_with_observer(model_cfg, cfg, source, seed, |_| {})
}

/// `train`, with an observer called at every epoch boundary.
pub fn train_with_observer<F: FnMut(EpochEvent)>(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    source: &EpisodeSource,
    seed: u64,
    mut observer: F,
) -> Result<(IclModel, RunMetrics), TrainError> {
    let mut model = IclModel::init(model_cfg, seed)?;
    let mut state = AdamState::new(&model.params());
    let total = cfg.total_steps();
    let mut steps = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut epoch_acc_sum = 0.0;

    for step in 0..total {
        let epoch = step / cfg.steps_per_epoch;
        let first = (step * cfg.batch) as u64;
        let episodes = source.sample_batch(seed, streams::TRAIN, first, cfg.batch)?;
        let targets: Vec<f64> = episodes.iter().map(|e| e.query_y as f64).collect();

        let mut fwd = model.forward_batch(&episodes)?;
        let loss_id = fwd.graph.bce_mean(fwd.logits, &targets).map_err(ModelError::from)?;
        let loss = fwd.graph.value(loss_id).item();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        fwd.graph.backward(loss_id).map_err(ModelError::from)?;
        model.zero_grads();
        model.accumulate_grads(&fwd);

        let logits = fwd.graph.value(fwd.logits).data();
        let correct = episodes
            .iter()
            .zip(logits)
            .filter(|(ep, &z)| bayes_predict(z) == ep.query_y)
            .count();
        let batch_acc = correct as f64 / episodes.len() as f64;
        epoch_acc_sum += batch_acc;

        let lr = onecycle_lr(step, total, cfg.lr_max);
        adamw_step(&mut model.params_mut(), &mut state, cfg, lr);
        steps.push(StepRecord {
            step,
            epoch,
            lr,
            loss,
            batch_acc,
        });

        if (step + 1) % cfg.steps_per_epoch == 0 {
            let train_acc = epoch_acc_sum / cfg.steps_per_epoch as f64;
            epoch_acc_sum = 0.0;
            let lane = streams::EPOCH_VAL + ((epoch as u64) << 32);
            let (val_acc, _) =
                evaluate(&model, source, cfg.epoch_eval_episodes, seed, lane)?;
            let record = EpochRecord {
                epoch,
                train_acc,
                val_acc,
            };
            observer(EpochEvent {
                epoch,
                model: &model,
                record: &record,
            });
            epochs.push(record);
        }
    }

    let (final_val_acc, final_val_ci) =
        evaluate(&model, source, cfg.eval_episodes, seed, streams::VALIDATION)?;
    let final_train_acc = epochs.last().map(|e| e.train_acc).unwrap_or(0.0);
    Ok((
        model,
        RunMetrics {
            steps,
            epochs,
            final_train_acc,
            final_val_acc,
            final_val_ci,
        },
    ))
}

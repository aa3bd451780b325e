//! Optimization loop: normalization, scheduled sampling, Adam and early
//! stopping on validation MAE.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, Matrix, ParameterStore, Var};
use crate::dataset::{SequenceDataset, Split};
use crate::error::{ensure, Error, Result};
use crate::evaluation::forecast_errors;
use crate::model::{squared_error_loss, Forecaster, Rollout, RolloutSpec};

/// Rescales every split with the training split's mean and standard deviation.
pub fn normalize(dataset: &SequenceDataset) -> Result<SequenceDataset> {
    ensure!(!dataset.is_normalized(), State, "dataset is already normalized");
    ensure!(
        !dataset.indices(Split::Train).is_empty(),
        Config,
        "cannot normalize without training sequences"
    );
    let stats = dataset.training_stats();
    if stats.variance == 0.0 {
        log::warn!("training data is constant; normalizing with divisor 1");
    }
    Ok(dataset.map_values(true, stats, |v| stats.normalize(v)))
}

/// Inverse of [`normalize`] using the stored statistics.
pub fn denormalize(dataset: &SequenceDataset) -> Result<SequenceDataset> {
    ensure!(dataset.is_normalized(), State, "dataset is not normalized");
    let stats = dataset.stats();
    Ok(dataset.map_values(false, stats, |v| stats.denormalize(v)))
}

/// Inverse-sigmoid decay `k / (k + exp(epoch / k))`.
pub fn scheduled_sampling_prob(epoch: usize, k: f64) -> f64 {
    k / (k + (epoch as f64 / k).exp())
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    1000
}
fn default_patience() -> usize {
    50
}
fn default_k() -> f64 {
    50.0
}
fn default_tau() -> usize {
    5
}
fn default_horizon() -> usize {
    15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// `None` picks `min(32, N_train)`.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_k")]
    pub scheduled_sampling_k: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            batch_size: None,
            scheduled_sampling_k: default_k(),
            seed: 0,
            tau: default_tau(),
            horizon: default_horizon(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate must be positive");
        ensure!(self.patience >= 1, Config, "patience must be at least 1");
        ensure!(self.tau >= 1 && self.horizon >= 1, Config, "tau and T must be at least 1");
        ensure!(self.scheduled_sampling_k > 0.0, Config, "scheduled sampling k must be positive");
        ensure!(self.batch_size != Some(0), Config, "batch size must be positive");
        Ok(())
    }

    pub fn batch_size_for(&self, n_train: usize) -> usize {
        self.batch_size.unwrap_or(32).min(n_train).max(1)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective per sequence, averaged over the epoch.
    pub train_loss: f64,
    pub val_mae: f64,
    pub teacher_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "val_mae"])?;
        for r in &self.epochs {
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_mae.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rollout on one batch and its objective `Σ_t ‖u_t − û_t‖² / B`.
pub fn batch_objective<M: Forecaster + ?Sized>(
    model: &M,
    g: &mut Graph,
    params: &ParameterStore,
    frames: &[Matrix],
    tau: usize,
    horizon: usize,
    teacher_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Rollout)> {
    ensure!(frames.len() >= tau + horizon, Argument, "need {} frames, got {}", tau + horizon, frames.len());
    let spec = RolloutSpec {
        observed: &frames[..tau],
        horizon,
        teacher: Some(frames),
        teacher_prob,
    };
    let rollout = model.rollout(g, params, &spec, rng)?;
    let total = squared_error_loss(g, &rollout, frames)?;
    let batch = frames[0].ncols() as f64;
    Ok((g.scale(total, 1.0 / batch), rollout))
}

/// Trains with validation MAE (closed loop) as the early-stopping metric.
pub fn train_loop<M: Forecaster + ?Sized>(model: &mut M, dataset: &SequenceDataset, config: &TrainConfig) -> Result<TrainHistory> {
    let val = dataset.indices(Split::Validation);
    let (tau, horizon) = (config.tau, config.horizon);
    train_loop_with(model, dataset, config, |m, _| {
        Ok(forecast_errors(m, dataset, &val, tau, horizon)?.mae)
    })
}

/// [`train_loop`] with a caller-supplied validation metric (lower is better).
pub fn train_loop_with<M, V>(model: &mut M, dataset: &SequenceDataset, config: &TrainConfig, mut validate: V) -> Result<TrainHistory>
where
    M: Forecaster + ?Sized,
    V: FnMut(&M, usize) -> Result<f64>,
{
    config.validate()?;
    let train = dataset.indices(Split::Train);
    ensure!(!train.is_empty(), Config, "training split is empty");
    ensure!(!dataset.indices(Split::Validation).is_empty(), Config, "validation split is empty");
    let len = config.tau + config.horizon;
    ensure!(
        len <= dataset.seq_len(),
        Config,
        "tau + T = {len} exceeds sequence length {}",
        dataset.seq_len()
    );
    model.geometry().check_sites(dataset.sites())?;
    if !dataset.is_normalized() {
        log::warn!("training on unnormalized data");
    }

    let batch = config.batch_size_for(train.len());
    let adam = config.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train.clone();
    let mut history = TrainHistory {
        best_val_mae: f64::INFINITY,
        ..TrainHistory::default()
    };
    let mut best: Option<ParameterStore> = None;
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let p = scheduled_sampling_prob(epoch, config.scheduled_sampling_k);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let frames = dataset.batch_frames(chunk, len)?;
            let mut g = Graph::new();
            let (loss, _) = batch_objective(&*model, &mut g, model.params(), &frames, config.tau, config.horizon, p, &mut rng)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::TrainingDivergence { epoch });
            }
            loss_sum += value * chunk.len() as f64;
            let params = model.params_mut();
            params.zero_grads();
            g.backward(loss, params)?;
            params.adam_step(&adam)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_mae = validate(model, epoch)?;
        ensure!(val_mae.is_finite(), Evaluation, "validation metric is {val_mae} at epoch {epoch}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
            teacher_prob: p,
        });
        log::info!("epoch {epoch}: loss {train_loss:.6e}, val mae {val_mae:.6e}");
        if val_mae < history.best_val_mae {
            history.best_val_mae = val_mae;
            history.best_epoch = epoch;
            best = Some(model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some(best) = best {
        *model.params_mut() = best;
    }
    Ok(history)
}

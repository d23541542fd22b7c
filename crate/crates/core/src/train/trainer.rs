use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adamw_step, clip_global_norm, cross_entropy_loss, AdamWConfig, AdamWState, TrainError};
use crate::dataio::Dataset;
use crate::metrics::{argmax_mask, ConfusionMatrix, UndefinedPolicy};
use crate::models::{save_weights, Mode, Model};
use crate::tensor::BN_MOMENTUM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    /// Stop after this many epochs.
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps, possibly mid-epoch.
    pub steps: Option<usize>,
    pub seed: u64,
    /// Global-norm gradient clipping; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 4,
            epochs: None,
            steps: None,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.optimizer.validate()?;
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.epochs.is_none() && self.steps.is_none() {
            return bad("either an epoch count or a step count is required");
        }
        if self.epochs == Some(0) || self.steps == Some(0) {
            return bad("epoch and step counts must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad("clip norm must be positive");
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training-mode batch loss over the epoch.
    pub loss: f64,
    /// Eval-mode pixel accuracy on the training set after the epoch.
    pub pixel_acc: f64,
    /// Eval-mode mean IoU on the training set after the epoch.
    pub miou: f64,
    pub seconds: f64,
}

fn check_dataset(model: &Model, dataset: &Dataset) -> Result<(), TrainError> {
    if dataset.classes.len() != model.config.num_classes {
        return Err(TrainError::ClassCount {
            dataset: dataset.classes.len(),
            model: model.config.num_classes,
        });
    }
    let (h, w) = dataset.image_hw();
    model.check_input(crate::tensor::Shape::new(1, dataset.image_channels(), h, w))?;
    Ok(())
}

/// Confusion matrix of eval-mode predictions over the whole dataset.
pub fn evaluate(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<ConfusionMatrix, TrainError> {
    check_dataset(model, dataset)?;
    let mut cm = ConfusionMatrix::new(dataset.classes.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, masks) = dataset.batch(chunk);
        let logits = model.forward(&images)?;
        cm.accumulate(&argmax_mask(&logits), &masks, &dataset.classes)?;
    }
    Ok(cm)
}

/// One shuffled pass over `dataset`, stopping early once `state.t` reaches
/// `cfg.steps`. The order of epoch `epoch` depends only on `cfg.seed` and
/// `epoch`.
pub fn train_epoch(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    state: &mut AdamWState<f32>,
    epoch: usize,
) -> Result<EpochLog, TrainError> {
    cfg.validate()?;
    check_dataset(model, dataset)?;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);

    let ignore = dataset.classes.ignore_label;
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        if cfg.steps.is_some_and(|s| state.t >= s as u64) {
            break;
        }
        let (images, masks) = dataset.batch(chunk);
        let trace = model.network.forward(&model.params, &images, Mode::Train)?;
        let loss = cross_entropy_loss(trace.output(), &masks, ignore)?;
        let mut grads = model.network.backward(&model.params, &trace, &loss.grad)?.params;
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        adamw_step(state, &cfg.optimizer, &mut model.params, &grads)?;
        model.network.fold_running_stats(&mut model.params, &trace, BN_MOMENTUM)?;
        loss_sum += loss.loss;
        batches += 1;
    }

    let cm = evaluate(model, dataset, cfg.batch_size)?;
    Ok(EpochLog {
        epoch,
        loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
        pixel_acc: cm.pixel_accuracy()?.global,
        miou: cm.mean_iou(UndefinedPolicy::Exclude)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Model plus optimizer state, advanced epoch by epoch until the configured
/// step or epoch budget is spent.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub state: AdamWState<f32>,
    pub epoch: usize,
    pub logs: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            state: AdamWState::new(),
            epoch: 0,
            logs: Vec::new(),
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.state.t
    }

    pub fn finished(&self) -> bool {
        self.cfg.steps.is_some_and(|s| self.state.t >= s as u64) || self.cfg.epochs.is_some_and(|e| self.epoch >= e)
    }

    /// Runs epochs until done, calling `on_epoch` after each.
    pub fn fit(&mut self, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<&[EpochLog], TrainError> {
        check_dataset(&self.model, dataset)?;
        while !self.finished() {
            self.epoch += 1;
            let log = train_epoch(&mut self.model, dataset, &self.cfg, &mut self.state, self.epoch)?;
            on_epoch(&log);
            self.logs.push(log);
        }
        Ok(&self.logs)
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> TrainError + '_ {
    move |source| TrainError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `epoch,loss,pixel_acc,miou,seconds`; with `timestamps = false`
/// the seconds column is written as 0 so reruns are byte-identical.
pub fn write_log_csv(path: impl AsRef<Path>, logs: &[EpochLog], timestamps: bool) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for log in logs {
        let row = EpochLog {
            seconds: if timestamps { log.seconds } else { 0.0 },
            ..log.clone()
        };
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_log_csv(path: impl AsRef<Path>) -> Result<Vec<EpochLog>, TrainError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

/// Sidecar metadata stored next to a weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: usize,
    pub optimizer: String,
    pub lr: f64,
    pub wd: f64,
    pub seed: u64,
    pub model: crate::models::ModelConfig,
}

impl Checkpoint {
    pub fn sidecar_path(weights: &Path) -> PathBuf {
        let mut s = weights.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }
}

/// Writes the weight file and `<weights>.json` with the training position.
pub fn save_checkpoint(trainer: &Trainer, weights: impl AsRef<Path>) -> Result<PathBuf, TrainError> {
    let weights = weights.as_ref();
    save_weights(&trainer.model.params, weights)?;
    let meta = Checkpoint {
        step: trainer.state.t,
        epoch: trainer.epoch,
        optimizer: "adamw".into(),
        lr: trainer.cfg.optimizer.lr,
        wd: trainer.cfg.optimizer.weight_decay,
        seed: trainer.cfg.seed,
        model: trainer.model.config.clone(),
    };
    let path = Checkpoint::sidecar_path(weights);
    let text = serde_json::to_string_pretty(&meta).expect("checkpoint serializes") + "\n";
    std::fs::write(&path, text).map_err(|source| TrainError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

//! Minibatch training with Adam, cosine-annealed learning rate and
//! best-on-validation checkpointing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError, PartMask, Split, TipPair};
use crate::eval::{self, EvalError, Frame, Predictor};
use crate::model::{Mode, ModelConfig, ModelError, ToolTipNet};
use crate::synth::{augment, frame_rng, splitmix64};
use crate::tensor::optim::{cosine_lr, AdamState};
use crate::tensor::TensorError;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOG_NAME: &str = "train_log.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("split {0} has no frames")]
    EmptySplit(Split),
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Random flips and rescaling of training frames.
    pub augment: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 12,
            lr: 1e-4,
            lr_min: 0.0,
            seed: 0,
            augment: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch norm needs batch_size >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(TrainError::InvalidConfig("need 0 <= lr_min <= lr, lr > 0".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub model: ToolTipNet<f32>,
}

/// Mixes the run seed with a purpose tag so the shuffle, init and
/// augmentation streams are independent.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Runs one epoch of updates; returns the mean batch loss.
pub fn train_epoch(
    net: &mut ToolTipNet<f32>,
    adam: &mut AdamState<f32>,
    frames: &[Frame],
    epoch: usize,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let lr = cosine_lr(epoch, config.epochs, config.lr, config.lr_min);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1 + epoch as u64)));
    let aug_seed = derive_seed(config.seed, 0xA0A0);

    let mut total = 0.0;
    let mut steps = 0;
    for batch in order.chunks(config.batch_size).filter(|b| b.len() >= 2) {
        let (masks, tips): (Vec<PartMask>, Vec<TipPair>) = batch
            .iter()
            .map(|&i| {
                let f = &frames[i];
                if config.augment {
                    let stream = (epoch * frames.len() + i) as u64;
                    augment(&f.mask, f.tips, &mut frame_rng(aug_seed, stream))
                } else {
                    (f.mask.clone(), f.tips)
                }
            })
            .unzip();
        let refs: Vec<&PartMask> = masks.iter().collect();
        let (fwd, loss) = net.loss_graph(&refs, &tips, Mode::Train)?;
        let value = fwd.graph.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFinite { epoch, step: steps });
        }
        let mut grads = fwd.graph.backward(loss)?;
        let grads: Vec<_> = fwd
            .params
            .iter()
            .zip(net.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| crate::tensor::Tensor::zeros(p.shape())))
            .collect();
        adam.step(net.params_mut(), &grads, lr);
        net.update_running_stats(&fwd.batch_stats);
        total += value;
        steps += 1;
    }
    Ok(total / steps.max(1) as f64)
}

/// Trains on the `train` split, validating on `val` after every epoch.
/// Writes `best.ckpt`, `last.ckpt` and a JSON-lines log into `out_dir`.
/// `on_epoch` sees each log entry as it is produced.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: impl AsRef<Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    let train_frames = eval::load_frames(dataset, Split::Train)?;
    let val_frames = eval::load_frames(dataset, Split::Val)?;
    if train_frames.len() < 2 {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val_frames.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }

    let mut net = ToolTipNet::<f32>::new(config.model.clone(), derive_seed(config.seed, 0))?;
    let mut adam = AdamState::new(net.params());
    let log_path = out_dir.join(LOG_NAME);
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(io(&log_path))?);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize)> = None;

    for epoch in 0..config.epochs {
        let start = std::time::Instant::now();
        let train_loss = train_epoch(&mut net, &mut adam, &train_frames, epoch, config)?;
        let report = eval::evaluate(&val_frames, Predictor::Model(&net), eval::DEFAULT_THRESHOLD)?;
        let entry = EpochLog {
            epoch,
            lr: cosine_lr(epoch, config.epochs, config.lr, config.lr_min),
            train_loss,
            val_rmse: report.mean_rmse,
            val_acc: report.accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        if best.map_or(true, |(r, _)| entry.val_rmse < r) {
            best = Some((entry.val_rmse, epoch));
            net.save(&best_path)?;
        }
        serde_json::to_writer(&mut log_file, &entry).expect("log entry serializes");
        log_file.write_all(b"\n").map_err(io(&log_path))?;
        log_file.flush().map_err(io(&log_path))?;
        on_epoch(&entry);
        log.push(entry);
    }
    net.save(out_dir.join(LAST_CHECKPOINT))?;
    let model = ToolTipNet::load(&best_path)?;
    Ok(TrainOutcome {
        log,
        best_epoch: best.expect("at least one epoch").1,
        best_checkpoint: best_path,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))));
        let c = TrainConfig {
            lr_min: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..4).map(|t| derive_seed(7, t)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(s[i], s[j]);
            }
        }
    }
}

//! Initialization, optimization, datasets and the train/eval loops.
//!
//! Every random draw of a run comes from one 32-byte ChaCha key. Model
//! initialization uses stream 0; epoch `e` shuffles with stream `2e + 2` and
//! draws dropout masks from stream `2e + 3`. A run restored from the key and
//! epoch counter therefore continues exactly like an uninterrupted one.

pub mod data;
pub mod init;
pub mod optim;

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode};
use crate::error::{Error, Result};
use crate::network::{build_model, Model, ModelConfig};
use crate::scalar::Scalar;
pub use data::{channel_stats, normalize, synthetic_bands, DatasetSource, Split, STD_FLOOR};
pub use optim::{lr_at, sgd_nesterov_step, OptimizerState, Schedule, BASE_LR, MOMENTUM, WEIGHT_DECAY};

/// Header of the training log.
pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_acc,test_loss,test_err";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_err: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> alloc::string::String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.test_loss, self.test_err
        )
    }
}

/// Receives log rows and checkpoint opportunities while training runs.
pub trait TrainSink<T> {
    fn epoch(&mut self, row: &EpochLog) -> Result<()>;

    /// Called after every epoch whose 1-based index is a multiple of the
    /// configured cadence.
    fn checkpoint(&mut self, _trainer: &Trainer<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainSink<T> for Vec<EpochLog> {
    fn epoch(&mut self, row: &EpochLog) -> Result<()> {
        self.push(*row);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Checkpoint cadence in epochs; `None` disables checkpoints.
    pub checkpoint_every: Option<usize>,
}

/// Model, optimizer and the counters needed to resume a run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub key: [u8; 32],
}

pub fn key_from_seed(seed: u64) -> [u8; 32] {
    ChaCha8Rng::seed_from_u64(seed).get_seed()
}

fn stream(key: [u8; 32], id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(id);
    rng
}

impl<T: Scalar> Trainer<T> {
    /// Builds and initializes a model from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let key = key_from_seed(seed);
        let model = build_model(config, &mut stream(key, 0))?;
        let optimizer = OptimizerState::new(&model.params);
        Ok(Self { model, optimizer, epoch: 0, key })
    }

    /// Sample order of epoch `epoch`.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut stream(self.key, 2 * epoch as u64 + 2));
        order
    }

    /// Train-mode loss of one batch with the current weights, without an
    /// update. Uses the dropout stream of the current epoch.
    pub fn probe_loss(&self, data: &DatasetSource<T>, indices: &[usize]) -> Result<f64> {
        let (images, labels) = data.batch(indices)?;
        let mut g = Graph::new();
        let mut rng = stream(self.key, 2 * self.epoch as u64 + 3);
        let logits = self.model.logits(&mut g, images, Mode::Train, &mut rng)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        Ok(g.value(loss).data()[0].as_f64())
    }

    /// Runs one epoch over `data`; returns mean loss and accuracy.
    pub fn train_epoch(&mut self, data: &DatasetSource<T>, batch_size: usize, lr: f64) -> Result<(f64, f64)> {
        if batch_size == 0 {
            return Err(Error::Usage("batch size must be positive".into()));
        }
        let epoch = self.epoch;
        let order = self.epoch_order(epoch, data.len());
        let mut dropout_rng = stream(self.key, 2 * epoch as u64 + 3);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            if chunk.len() < 2 {
                log::warn!("epoch {epoch}: dropping a singleton batch, batch norm needs at least 2 samples");
                continue;
            }
            let (images, labels) = data.batch(chunk)?;
            let mut g = Graph::new();
            let logits = self.model.logits(&mut g, images, Mode::Train, &mut dropout_rng)?;
            correct += count_correct(g.value(logits).data(), g.shape(logits)[1], &labels);
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
            let moments = g.take_moments();
            let grads = g.backward(loss)?;
            self.model.params.apply_moments(&moments);
            self.model.params.zero_grads();
            self.model.params.accumulate_grads(&grads);
            sgd_nesterov_step(&mut self.model.params, &mut self.optimizer, lr)?;
            self.model.params.clear_grads();
        }
        if seen == 0 {
            return Err(Error::Input("training split has fewer than 2 records".into()));
        }
        Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
    }
}

/// Seed of the shipped two-class toy set.
pub const TOY_DATA_SEED: u64 = 2024;

/// The shipped toy problem: 256 training and 128 test images, 3 x 8 x 8, two
/// classes, both normalized with the training statistics.
pub fn toy_splits<T: Scalar>() -> Result<(DatasetSource<T>, DatasetSource<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_DATA_SEED);
    let train = synthetic_bands(256, 2, 3, 8, Split::Train, &mut rng)?;
    let test = synthetic_bands(128, 2, 3, 8, Split::Test, &mut rng)?;
    let (mean, std) = (train.mean.clone(), train.std.clone());
    Ok((train.normalized_with(&mean, &std)?, test.normalized_with(&mean, &std)?))
}

fn count_correct<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if v.as_f64() > row[best].as_f64() { i } else { best });
            best == l
        })
        .count()
}

/// Mean loss and error rate in eval mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &DatasetSource<T>, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Usage("evaluation needs records and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(batch_size) {
        let (images, labels) = data.batch(chunk)?;
        let mut g = Graph::new();
        let logits = model.logits(&mut g, images, Mode::Eval, &mut rng)?;
        correct += count_correct(g.value(logits).data(), g.shape(logits)[1], &labels);
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        loss_sum += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, 1.0 - correct as f64 / n))
}

/// Lowest test error seen and the epoch it occurred in.
pub fn best_test_error(log: &[EpochLog]) -> Option<(usize, f64)> {
    log.iter().fold(None, |best, r| match best {
        Some((_, e)) if e <= r.test_err => best,
        _ => Some((r.epoch, r.test_err)),
    })
}

/// Trains from `trainer.epoch` up to `config.epochs`, reporting one row per
/// epoch to `sink`.
pub fn train<T: Scalar, S: TrainSink<T> + ?Sized>(
    trainer: &mut Trainer<T>,
    train_data: &DatasetSource<T>,
    test_data: &DatasetSource<T>,
    config: &TrainConfig,
    sink: &mut S,
) -> Result<()> {
    if train_data.num_classes != trainer.model.config.num_classes {
        return Err(Error::Input(format!(
            "dataset has {} classes, model expects {}",
            train_data.num_classes, trainer.model.config.num_classes
        )));
    }
    while trainer.epoch < config.epochs {
        let lr = trainer.optimizer.lr_at(trainer.epoch, config.epochs);
        let (train_loss, train_acc) = trainer.train_epoch(train_data, config.batch_size, lr)?;
        let (test_loss, test_err) = evaluate(&trainer.model, test_data, config.batch_size)?;
        sink.epoch(&EpochLog { epoch: trainer.epoch, lr, train_loss, train_acc, test_loss, test_err })?;
        trainer.epoch += 1;
        if config.checkpoint_every.is_some_and(|c| c > 0 && trainer.epoch % c == 0) {
            sink.checkpoint(trainer)?;
        }
    }
    Ok(())
}

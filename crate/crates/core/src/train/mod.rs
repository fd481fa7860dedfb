//! Training loop, evaluation and the learning-rate range test on networks.

mod optim;
mod schedule;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use optim::{AdamW, OptimizerState};
pub use schedule::{
    lr_range_test, one_cycle_lr, LrSchedule, RangeTestResult, RangeTestSubject, ONE_CYCLE_DIV, ONE_CYCLE_FINAL_DIV,
    ONE_CYCLE_WARMUP, RANGE_TEST_DIVERGENCE, RANGE_TEST_SMOOTHING,
};

use crate::data::{Batch, Checkpoint, Dataset, TrainingMeta};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{cross_entropy_on_summed_currents, predictions};
use crate::snn::{ForwardOptions, Network};
use crate::tensor::Tensor;

pub const DEFAULT_TIMESTEPS: usize = 10;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub timesteps: usize,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 64,
            timesteps: DEFAULT_TIMESTEPS,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            schedule: LrSchedule::OneCycle { max_lr: 1e-3 },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::contract("at least one timestep is required"));
        }
        if self.batch_size < 1 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::contract("weight decay must be non-negative"));
        }
        let lr = match self.schedule {
            LrSchedule::OneCycle { max_lr } => max_lr,
            LrSchedule::Constant { lr } => lr,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate {lr} must be positive")));
        }
        Ok(())
    }
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch, in training mode.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy of the training-mode forward passes over the epoch.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final network, or the last one before a divergent step.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
    pub diverged: Option<Divergence>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Derive a stream-specific seed so that shuffling and dropout draw from
/// unrelated generators.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Result of one forward/backward pass on a minibatch.
pub struct StepGrads {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Tensor<f32>>,
}

/// Forward in training mode, cross-entropy on the summed output currents,
/// backward. Parameters are not changed except for batch-norm running
/// statistics.
pub fn compute_gradients(net: &mut Network<f32>, batch: &Batch, timesteps: usize, seed: u64) -> Result<StepGrads> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, &batch.images, &ForwardOptions::train(timesteps, seed))?;
    let loss = cross_entropy_on_summed_currents(&mut g, out.logits, &batch.labels)?;
    let value = f64::from(g.value(loss).item());
    let correct = count_correct(g.value(out.logits), &batch.labels);
    if !value.is_finite() {
        return Ok(StepGrads {
            loss: value,
            correct,
            grads: Vec::new(),
        });
    }
    g.backward(loss)?;
    let grads = out
        .params
        .iter()
        .map(|p| {
            g.grad(p.var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(p.var)))
        })
        .collect();
    Ok(StepGrads {
        loss: value,
        correct,
        grads,
    })
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    predictions(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Train `net` on `train_set`, reporting validation metrics on `val_set`
/// after each epoch. A non-finite loss or gradient stops training and
/// returns the network as it was before that step.
pub fn train(net: Network<f32>, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut net = net;
    let optimizer = AdamW::with_weight_decay(cfg.weight_decay);
    let mut state = OptimizerState::default();
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut diverged = None;
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        let mut lr = cfg.schedule.lr(step, total);
        for batch in train_set.shuffled_batches(cfg.batch_size, derive_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64)) {
            lr = cfg.schedule.lr(step, total);
            // Batch-norm running statistics change during the forward pass,
            // so keep them to restore on divergence.
            let before = net.clone();
            let step_seed = derive_seed(cfg.seed, DROPOUT_STREAM, step as u64);
            let grads = compute_gradients(&mut net, &batch, cfg.timesteps, step_seed)?;
            let update = if grads.loss.is_finite() {
                optimizer.step(&mut state, net.params_mut(), &grads.grads, lr)
            } else {
                Err(Error::NonFinite {
                    location: "training loss".into(),
                })
            };
            if let Err(e) = update {
                match e {
                    Error::NonFinite { location } => {
                        log::error!("training diverged at epoch {epoch}, step {step}: {location}");
                        net = before;
                        diverged = Some(Divergence {
                            epoch,
                            step,
                            reason: location,
                        });
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
            loss_sum += grads.loss * batch.labels.len() as f64;
            correct += grads.correct;
            seen += batch.labels.len();
            step += 1;
        }
        let val = if val_set.is_empty() {
            Evaluation {
                loss: f64::NAN,
                accuracy: f64::NAN,
            }
        } else {
            evaluate(&mut net, val_set, cfg.timesteps, cfg.batch_size)?
        };
        let row = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            val_loss: val.loss,
            train_acc: correct as f64 / seen as f64,
            val_acc: val.accuracy,
            lr,
        };
        log::info!(
            "epoch {}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}, lr {:.2e}",
            row.epoch,
            row.train_loss,
            row.train_acc,
            row.val_loss,
            row.val_acc,
            row.lr
        );
        history.push(row);
    }

    let epochs = history.len();
    let mut checkpoint = Checkpoint::new(
        net,
        TrainingMeta {
            seed: cfg.seed,
            timesteps: cfg.timesteps,
            epochs,
        },
    );
    if state.step > 0 {
        checkpoint.optimizer = Some(state);
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        diverged,
    })
}

/// Loss and accuracy of the argmax over output currents summed over
/// `timesteps` steps, in eval mode.
pub fn evaluate(net: &mut Network<f32>, data: &Dataset, timesteps: usize, batch_size: usize) -> Result<Evaluation> {
    if timesteps < 1 {
        return Err(Error::contract("at least one timestep is required"));
    }
    if data.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let opts = ForwardOptions::eval(timesteps);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for batch in data.sequential_batches(batch_size.max(1)) {
        let mut g = Graph::new();
        let out = net.forward(&mut g, &batch.images, &opts)?;
        let loss = cross_entropy_on_summed_currents(&mut g, out.logits, &batch.labels)?;
        loss_sum += f64::from(g.value(loss).item()) * batch.labels.len() as f64;
        correct += count_correct(g.value(out.logits), &batch.labels);
    }
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

pub fn write_metrics_csv(path: impl AsRef<Path>, history: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(file, history)
}

/// Metrics with the header `epoch,train_loss,val_loss,train_acc,val_acc,lr`;
/// the header is written even for an empty history.
pub fn write_metrics<W: std::io::Write>(out: W, history: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr"])?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("metrics", e))?;
    Ok(())
}

/// Range-test subject training a private copy of a network with AdamW on a
/// cycling sequence of batches.
pub struct NetworkRangeTest<'a> {
    net: Network<f32>,
    data: &'a Dataset,
    optimizer: AdamW,
    state: OptimizerState,
    batch_size: usize,
    timesteps: usize,
    seed: u64,
    step: usize,
}

impl<'a> NetworkRangeTest<'a> {
    pub fn new(net: &Network<f32>, data: &'a Dataset, cfg: &TrainConfig) -> Self {
        Self {
            net: net.clone(),
            data,
            optimizer: AdamW::with_weight_decay(cfg.weight_decay),
            state: OptimizerState::default(),
            batch_size: cfg.batch_size,
            timesteps: cfg.timesteps,
            seed: cfg.seed,
            step: 0,
        }
    }
}

impl RangeTestSubject for NetworkRangeTest<'_> {
    fn step(&mut self, lr: f64) -> Result<f64> {
        let per_epoch = self.data.len().div_ceil(self.batch_size).max(1);
        let epoch = (self.step / per_epoch) as u64;
        let batch = self
            .data
            .shuffled_batches(self.batch_size, derive_seed(self.seed, SHUFFLE_STREAM, epoch))
            .nth(self.step % per_epoch)
            .ok_or_else(|| Error::contract("range test needs a non-empty dataset"))?;
        let seed = derive_seed(self.seed, DROPOUT_STREAM, self.step as u64);
        self.step += 1;
        let grads = compute_gradients(&mut self.net, &batch, self.timesteps, seed)?;
        if grads.loss.is_finite() {
            match self.optimizer.step(&mut self.state, self.net.params_mut(), &grads.grads, lr) {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
        Ok(grads.loss)
    }
}

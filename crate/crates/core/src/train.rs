//! Training hyperparameters, batching and the plain supervised loop shared by
//! the baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Split};
use crate::error::{Error, Result};
use crate::model::LayeredModel;
use crate::nn::{AdamWConfig, Graph, Group, NodeId, OptimizerState, Schedule};
use crate::tensor::Tensor;

/// Hyperparameters every method shares, so comparisons stay controlled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        TrainingConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: a.learning_rate,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    /// Fresh optimizer whose rate decays linearly to zero over `epochs` passes.
    pub fn optimizer(&self, model: &LayeredModel, epochs: usize, samples: usize) -> OptimizerState {
        let total_steps = epochs * self.batches_per_epoch(samples);
        OptimizerState::new(&model.params, self.adamw(), Schedule::LinearDecay { total_steps })
    }
}

/// Independent random streams per phase, so that re-running any phase from
/// the same seed reproduces it regardless of what ran before.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Warmup = 1,
    Distill = 2,
    Recalibrate = 3,
    Baseline = 4,
    MonteCarlo = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Shuffled sample indices cut into batches; the last batch may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Tokens and labels of the samples at `indices`.
pub struct Batch<'a> {
    pub tokens: Vec<&'a [u32]>,
    pub samples: Vec<&'a Sample>,
}

impl<'a> Batch<'a> {
    pub fn gather(split: &'a Split, indices: &[usize]) -> Self {
        let samples: Vec<&Sample> = indices.iter().map(|&i| &split.samples[i]).collect();
        Batch {
            tokens: samples.iter().map(|s| s.tokens.as_slice()).collect(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[batch, classes]` one-hot label matrix.
    pub fn one_hot(&self, classes: usize) -> Tensor {
        self.targets(classes, |s| {
            let mut t = vec![0.0; classes];
            t[s.label] = 1.0;
            Ok(t)
        })
        .expect("labels are in range")
    }

    /// `[batch, classes]` matrix of per-sample target distributions.
    pub fn targets(&self, classes: usize, f: impl Fn(&Sample) -> Result<Vec<f64>>) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.len() * classes);
        for s in &self.samples {
            let t = f(s)?;
            if t.len() != classes {
                return Err(Error::Shape(format!("target of length {} for {classes} classes", t.len())));
            }
            data.extend(t);
        }
        Tensor::new(vec![self.len(), classes], data)
    }
}

/// Uniform `[batch, classes]` matrix.
pub fn uniform_rows(batch: usize, classes: usize) -> Tensor {
    Tensor::filled(&[batch, classes], 1.0 / classes as f64)
}

/// Cross-entropy of the main classifier against per-sample targets, training
/// only the main network (embeddings, backbone, main classifier). Returns the
/// mean loss of every epoch.
pub fn train_main_network(
    model: &mut LayeredModel,
    train: &Split,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
    target: impl Fn(&Sample) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let classes = model.num_classes();
    let mut opt = cfg.optimizer(model, cfg.epochs, train.len());
    model.params.train_only(Group::is_main_network);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(train.len(), cfg.batch_size, rng);
        for idx in &batches {
            let batch = Batch::gather(train, idx);
            let targets = batch.targets(classes, &target)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch.tokens, Some(rng))?;
            let t = g.input(targets)?;
            let main: NodeId = *out.logits.last().expect("at least two layers");
            let loss = g.cross_entropy(main, t)?;
            total += g.value(loss).item()?;
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        epoch_losses.push(total / batches.len() as f64);
    }
    model.params.unfreeze_all();
    Ok(epoch_losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = stream_rng(1, Stream::Baseline);
        let b = shuffled_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        use rand::Rng;
        let a: u64 = stream_rng(7, Stream::Warmup).random();
        let b: u64 = stream_rng(7, Stream::Warmup).random();
        let c: u64 = stream_rng(7, Stream::Distill).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainingConfig {
            batch_size: 0,
            ..TrainingConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "batch_size"));
        let bad = TrainingConfig {
            beta2: 1.0,
            ..TrainingConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "beta2"));
    }
}

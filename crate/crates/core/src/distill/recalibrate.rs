use rand_chacha::ChaCha8Rng;

use super::{Observer, Stage};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::LayeredModel;
use crate::nn::{AdamWConfig, Graph, Group, OptimizerState, Schedule};
use crate::train::{shuffled_batches, uniform_rows, Batch, TrainingConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecalibrationOutcome {
    pub mean_loss: f64,
    pub batches: usize,
    pub learning_rate: f64,
}

/// One epoch over the ambiguous samples minimising
/// `0.5 · CE(main, y) + 0.5 · CE(main, uniform)`, updating the main network
/// only. Uses a fresh AdamW with `training`'s settings except for the rate,
/// which is `learning_rate` held constant for the epoch.
pub fn recalibrate(
    model: &mut LayeredModel,
    ambiguous: &Split,
    training: &TrainingConfig,
    learning_rate: f64,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn Observer,
) -> Result<RecalibrationOutcome> {
    training.validate()?;
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::config("recalibration_learning_rate", format!("{learning_rate} must be positive and finite")));
    }
    if ambiguous.is_empty() {
        return Err(Error::Invalid("re-calibration needs at least one ambiguous sample".into()));
    }
    let classes = model.num_classes();
    let main_layer = model.num_layers() - 1;
    let mut opt = OptimizerState::new(
        &model.params,
        AdamWConfig {
            learning_rate,
            ..training.adamw()
        },
        Schedule::Constant,
    );
    model.params.train_only(Group::is_main_network);

    let batches = shuffled_batches(ambiguous.len(), training.batch_size, rng);
    let mut total = 0.0;
    for (b, idx) in batches.iter().enumerate() {
        let batch = Batch::gather(ambiguous, idx);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.tokens, Some(rng))?;
        let z = out.logits[main_layer];
        let y = g.input(batch.one_hot(classes))?;
        let u = g.input(uniform_rows(batch.len(), classes))?;
        let hard = g.cross_entropy(z, y)?;
        let flat = g.cross_entropy(z, u)?;
        let hard = g.scale(hard, 0.5)?;
        let flat = g.scale(flat, 0.5)?;
        let loss = g.add(hard, flat)?;
        total += g.value(loss).item()?;
        let grads = g.backward(loss)?;
        opt.step(&mut model.params, &grads)?;
        observer.observe(Stage::RecalibrationBatch { batch: b }, &model.params);
    }
    model.params.unfreeze_all();
    Ok(RecalibrationOutcome {
        mean_loss: total / batches.len() as f64,
        batches: batches.len(),
        learning_rate,
    })
}

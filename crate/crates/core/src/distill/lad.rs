use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DistillConfig, Observer, Stage};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::LayeredModel;
use crate::nn::{cross_entropy, Graph, Group, NodeId, OptimizerState};
use crate::train::{shuffled_batches, Batch, TrainingConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    /// Step-1 loss of the main classifier.
    pub main: f64,
    /// Step-2 loss of the source probe.
    pub source: f64,
}

/// `λ · CE(pred, target) + (1 - λ) · CE(pred, teacher)` on plain vectors.
pub fn distill_loss(pred: &[f64], target: &[f64], teacher: &[f64], lambda: f64) -> Result<f64> {
    Ok(lambda * cross_entropy(pred, target)? + (1.0 - lambda) * cross_entropy(pred, teacher)?)
}

/// Separate AdamW states for the two steps; each only ever touches its own
/// parameters.
pub struct DistillOptimizers {
    pub main: OptimizerState,
    pub source: OptimizerState,
}

impl DistillOptimizers {
    pub fn new(model: &LayeredModel, training: &TrainingConfig, samples: usize) -> Self {
        DistillOptimizers {
            main: training.optimizer(model, training.epochs, samples),
            source: training.optimizer(model, training.epochs, samples),
        }
    }
}

fn check_source(model: &LayeredModel, source_idx: usize) -> Result<()> {
    if source_idx == 0 || source_idx >= model.num_layers() {
        return Err(Error::Invalid(format!(
            "source layer must lie in 1..{}, got {source_idx}",
            model.num_layers()
        )));
    }
    Ok(())
}

/// Records `λ · CE(student, y) + (1 - λ) · CE(student, stop_grad(softmax(teacher)))`.
fn distill_node(g: &mut Graph, student: NodeId, teacher: NodeId, y: NodeId, lambda: f64) -> Result<NodeId> {
    let t = g.softmax(teacher)?;
    let t = g.detach(t)?;
    let hard = g.cross_entropy(student, y)?;
    let soft = g.cross_entropy(student, t)?;
    let hard = g.scale(hard, lambda)?;
    let soft = g.scale(soft, 1.0 - lambda)?;
    g.add(hard, soft)
}

/// One batch of two-step self-distillation.
///
/// Step 1 updates the main network (embeddings, backbone, main classifier)
/// towards the one-hot labels and the source probe's detached prediction.
/// Step 2 then freezes everything but probe `source_idx` and, from a fresh
/// forward pass, updates it towards the labels and the main classifier's
/// detached prediction. `position` is `(epoch, batch)` for the observer.
#[allow(clippy::too_many_arguments)]
pub fn distill_batch(
    model: &mut LayeredModel,
    batch: &Batch<'_>,
    lambda: f64,
    source_idx: usize,
    opts: &mut DistillOptimizers,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn Observer,
    position: (usize, usize),
) -> Result<BatchLosses> {
    check_source(model, source_idx)?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::config("lambda", "must lie in (0, 1)"));
    }
    let (epoch, b) = position;
    let main_layer = model.num_layers() - 1;
    let src_layer = source_idx - 1;
    let y_data = batch.one_hot(model.num_classes());

    model.params.train_only(Group::is_main_network);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.tokens, Some(rng))?;
    let y = g.input(y_data.clone())?;
    let loss = distill_node(&mut g, out.logits[main_layer], out.logits[src_layer], y, lambda)?;
    let main = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    opts.main.step(&mut model.params, &grads)?;
    observer.observe(Stage::LadAfterStep1 { epoch, batch: b }, &model.params);

    let source_group = Group::Probe(source_idx);
    model.params.train_only(|grp| grp == source_group);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.tokens, Some(rng))?;
    let y = g.input(y_data)?;
    let loss = distill_node(&mut g, out.logits[src_layer], out.logits[main_layer], y, lambda)?;
    let source = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    opts.source.step(&mut model.params, &grads)?;
    model.params.unfreeze_all();
    observer.observe(Stage::LadAfterStep2 { epoch, batch: b }, &model.params);

    Ok(BatchLosses { main, source })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LadOutcome {
    /// Mean step-1 and step-2 losses of every epoch.
    pub epoch_losses: Vec<BatchLosses>,
    pub step1_updates: usize,
    pub step2_updates: usize,
    /// Rate of the last main-network update.
    pub final_learning_rate: f64,
}

/// Runs `training.epochs` epochs of [`distill_batch`] over shuffled batches
/// of `train`, with linear learning-rate decay in both optimizers.
pub fn train_lad(
    model: &mut LayeredModel,
    train: &Split,
    training: &TrainingConfig,
    cfg: &DistillConfig,
    source_idx: usize,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn Observer,
) -> Result<LadOutcome> {
    training.validate()?;
    cfg.validate()?;
    check_source(model, source_idx)?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let mut opts = DistillOptimizers::new(model, training, train.len());
    let mut outcome = LadOutcome::default();
    for epoch in 1..=training.epochs {
        let batches = shuffled_batches(train.len(), training.batch_size, rng);
        let mut sum = BatchLosses::default();
        for (b, idx) in batches.iter().enumerate() {
            let batch = Batch::gather(train, idx);
            observer.observe(Stage::LadBatchStart { epoch, batch: b }, &model.params);
            outcome.final_learning_rate = opts.main.current_lr();
            let l = distill_batch(model, &batch, cfg.lambda, source_idx, &mut opts, rng, observer, (epoch, b))?;
            sum.main += l.main;
            sum.source += l.source;
        }
        let n = batches.len() as f64;
        let mean = BatchLosses {
            main: sum.main / n,
            source: sum.source / n,
        };
        log::info!("distillation epoch {epoch}: main {:.4}, source {:.4}", mean.main, mean.source);
        outcome.epoch_losses.push(mean);
    }
    outcome.step1_updates = opts.main.steps_taken();
    outcome.step2_updates = opts.source.steps_taken();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_main_loss() {
        let l = distill_loss(&[0.7, 0.2, 0.1], &[1.0, 0.0, 0.0], &[0.5, 0.3, 0.2], 0.6).unwrap();
        let soft = -(0.5 * 0.7f64.ln() + 0.3 * 0.2f64.ln() + 0.2 * 0.1f64.ln());
        assert!((soft - 1.1217).abs() < 1e-4);
        assert!((l - (0.6 * -(0.7f64.ln()) + 0.4 * soft)).abs() < 1e-12);
        assert!((l - 0.6627).abs() < 1e-4);
    }

    #[test]
    fn teacher_equal_to_label_collapses_to_plain_ce() {
        let y = [0.0, 1.0, 0.0];
        let p = [0.2, 0.5, 0.3];
        let l = distill_loss(&p, &y, &y, 0.6).unwrap();
        assert!((l - cross_entropy(&p, &y).unwrap()).abs() < 1e-12);
    }
}

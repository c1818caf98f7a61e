use std::collections::BTreeMap;

use log::{info, warn};
use rand_chacha::ChaCha8Rng;

use super::selection::{compute_la, extract_ambiguous, select_source_layer};
use super::{AmbiguityRecord, EntropyProfile, Observer, SourceSelection, Stage, WarmupConfig};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::metrics::entropy;
use crate::model::LayeredModel;
use crate::nn::{Graph, Group};
use crate::train::{shuffled_batches, Batch, TrainingConfig};

#[derive(Clone, Debug)]
pub struct WarmupOutcome {
    pub selection: SourceSelection,
    pub profile: EntropyProfile,
    pub ambiguity: AmbiguityRecord,
    /// Mean summed probe loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean entropy of every probe's prediction over `split`, one entry per layer.
pub fn layer_entropies(model: &LayeredModel, split: &Split) -> Result<Vec<f64>> {
    let outputs = model.predict(&split.token_refs())?;
    let mut sums = vec![0.0; model.num_layers()];
    for o in &outputs {
        for (s, p) in sums.iter_mut().zip(&o.probs) {
            *s += entropy(p);
        }
    }
    Ok(sums.into_iter().map(|s| s / outputs.len() as f64).collect())
}

/// Level of ambiguity of every sample in `split` under the current model.
pub fn level_of_ambiguity(model: &LayeredModel, split: &Split, source_idx: usize) -> Result<BTreeMap<u64, f64>> {
    let outputs = model.predict(&split.token_refs())?;
    let mut la = BTreeMap::new();
    for (s, o) in split.samples.iter().zip(&outputs) {
        let conf: Vec<f64> = o.probs.iter().map(|p| p[s.label]).collect();
        la.insert(s.id, compute_la(&conf, source_idx)?);
    }
    Ok(la)
}

/// Jointly trains the backbone and every probe on the summed one-hot
/// cross-entropy of all probes until the selected source layer repeats in
/// consecutive epochs (or the epoch cap is reached), then scores every
/// training sample's level of ambiguity and extracts the ambiguous set.
pub fn warmup_train(
    model: &mut LayeredModel,
    train: &Split,
    validation: &Split,
    cfg: &WarmupConfig,
    training: &TrainingConfig,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn Observer,
) -> Result<WarmupOutcome> {
    cfg.validate()?;
    training.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Invalid("warm-up needs non-empty train and validation splits".into()));
    }
    if !model.params.matches_snapshot(model.initial_snapshot()) {
        return Err(Error::Invalid("warm-up expects a freshly initialised model".into()));
    }
    if cfg.freeze_backbone {
        model.params.train_only(|g| matches!(g, Group::Probe(_) | Group::MainClassifier));
    } else {
        model.params.unfreeze_all();
    }
    let classes = model.num_classes();
    let mut opt = training.optimizer(model, cfg.max_epochs, train.len());
    let mut profile = EntropyProfile::default();
    let mut epoch_losses = Vec::new();
    let mut stabilized = false;

    for epoch in 1..=cfg.max_epochs {
        let batches = shuffled_batches(train.len(), training.batch_size, rng);
        let mut total = 0.0;
        for idx in &batches {
            let batch = Batch::gather(train, idx);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch.tokens, Some(rng))?;
            let y = g.input(batch.one_hot(classes))?;
            let losses = out
                .logits
                .iter()
                .map(|&z| g.cross_entropy(z, y))
                .collect::<Result<Vec<_>>>()?;
            let loss = g.sum(&losses)?;
            total += g.value(loss).item()?;
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &grads)?;
        }
        epoch_losses.push(total / batches.len() as f64);

        let entropies = layer_entropies(model, validation)?;
        let selected = select_source_layer(&entropies)?;
        info!("warm-up epoch {epoch}: entropies {entropies:.4?}, source layer {selected}");
        let repeated = profile.selections.last() == Some(&selected);
        profile.epochs.push(entropies);
        profile.selections.push(selected);
        observer.observe(Stage::WarmupEpoch { epoch }, &model.params);
        if repeated {
            stabilized = true;
            break;
        }
    }
    model.params.unfreeze_all();

    let source_idx = *profile.selections.last().expect("at least one epoch ran");
    if !stabilized {
        warn!(
            "source layer did not repeat within {} warm-up epochs; using the last selection, layer {source_idx}",
            cfg.max_epochs
        );
    }
    let la = level_of_ambiguity(model, train, source_idx)?;
    let ambiguous = extract_ambiguous(&la, cfg.ambiguous_fraction)?;
    Ok(WarmupOutcome {
        selection: SourceSelection {
            source_idx,
            epochs: profile.selections.len(),
            stabilized,
        },
        profile,
        ambiguity: AmbiguityRecord {
            source_idx,
            la,
            ambiguous,
        },
        epoch_losses,
    })
}

//! Three-phase training: warm-up with source-layer selection and ambiguous
//! sample extraction, two-step self-distillation from the source probe, and
//! confidence re-calibration on the ambiguous samples.

mod lad;
mod pipeline;
mod recalibrate;
mod selection;
mod warmup;

pub use lad::{distill_batch, distill_loss, train_lad, BatchLosses, DistillOptimizers, LadOutcome};
pub use pipeline::{run_pipeline, PipelineOutput, LAD_RC_TAG, LAD_TAG};
pub use recalibrate::{recalibrate, RecalibrationOutcome};
pub use selection::{compute_la, extract_ambiguous, select_source_layer};
pub use warmup::{layer_entropies, level_of_ambiguity, warmup_train, WarmupOutcome};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub max_epochs: usize,
    /// Fraction `m` of training samples, lowest level of ambiguity first,
    /// that forms the ambiguous set.
    pub ambiguous_fraction: f64,
    /// Train only the probes during warm-up, leaving the backbone at its
    /// initialisation.
    pub freeze_backbone: bool,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            max_epochs: 5,
            ambiguous_fraction: 0.10,
            freeze_backbone: false,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if !(self.ambiguous_fraction > 0.0 && self.ambiguous_fraction < 1.0) {
            return Err(Error::config("ambiguous_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the one-hot term in both distillation losses.
    pub lambda: f64,
    pub recalibration_epochs: usize,
    /// Re-calibration rate; defaults to the rate of the last distillation update.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recalibration_learning_rate: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.6,
            recalibration_epochs: 1,
            recalibration_learning_rate: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::config("lambda", "must lie in (0, 1)"));
        }
        if self.recalibration_epochs != 1 {
            return Err(Error::config("recalibration_epochs", "re-calibration runs exactly one epoch"));
        }
        if let Some(lr) = self.recalibration_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("recalibration_learning_rate", "must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// Mean validation entropy of every probe after each warm-up epoch, and the
/// source layer each of those profiles selects.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    /// `epochs[e][l - 1]`: mean entropy of probe `l` after epoch `e + 1`.
    pub epochs: Vec<Vec<f64>>,
    pub selections: Vec<usize>,
}

impl EntropyProfile {
    pub fn last(&self) -> Option<&[f64]> {
        self.epochs.last().map(Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSelection {
    /// 1-based layer whose probe serves as the distillation source.
    pub source_idx: usize,
    /// Warm-up epochs actually run.
    pub epochs: usize,
    /// False when the selection never repeated within the epoch cap.
    pub stabilized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmbiguityRecord {
    pub source_idx: usize,
    pub la: BTreeMap<u64, f64>,
    pub ambiguous: BTreeSet<u64>,
}

/// Points in the pipeline at which an [`Observer`] sees the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// End of warm-up epoch `epoch` (1-based).
    WarmupEpoch { epoch: usize },
    /// Weights restored to their initialisation after warm-up.
    Reset,
    LadBatchStart { epoch: usize, batch: usize },
    LadAfterStep1 { epoch: usize, batch: usize },
    LadAfterStep2 { epoch: usize, batch: usize },
    RecalibrationBatch { batch: usize },
}

/// Read-only hook into a pipeline run, used to audit freeze contracts.
pub trait Observer {
    fn observe(&mut self, _stage: Stage, _params: &ParameterSet) {}
}

impl Observer for () {}

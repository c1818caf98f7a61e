use log::info;

use super::{
    recalibrate, train_lad, warmup_train, DistillConfig, LadOutcome, Observer, RecalibrationOutcome, Stage,
    WarmupConfig, WarmupOutcome,
};
use crate::data::Corpus;
use crate::error::Result;
use crate::evaluate::{evaluate, EvalMode, MetricsReport};
use crate::model::{EncoderConfig, LayeredModel};
use crate::train::{stream_rng, Stream, TrainingConfig};

/// Method tags as they appear in reports.
pub const LAD_TAG: &str = "LAD";
pub const LAD_RC_TAG: &str = "LAD + RC";

/// Everything a pipeline run produces.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub warmup_model: LayeredModel,
    pub lad_model: LayeredModel,
    /// Present when re-calibration ran.
    pub rc_model: Option<LayeredModel>,
    pub warmup: WarmupOutcome,
    pub lad: LadOutcome,
    pub recalibration: Option<RecalibrationOutcome>,
    pub lad_report: MetricsReport,
    pub rc_report: Option<MetricsReport>,
}

impl PipelineOutput {
    /// The final model: re-calibrated if re-calibration ran.
    pub fn final_model(&self) -> &LayeredModel {
        self.rc_model.as_ref().unwrap_or(&self.lad_model)
    }

    pub fn final_report(&self) -> &MetricsReport {
        self.rc_report.as_ref().unwrap_or(&self.lad_report)
    }
}

/// Warm-up, reset, two-step distillation, optional re-calibration, and
/// evaluation on the eval split. `seed` drives model initialisation and
/// every random stream.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    corpus: &Corpus,
    encoder: &EncoderConfig,
    training: &TrainingConfig,
    warmup_cfg: &WarmupConfig,
    distill_cfg: &DistillConfig,
    recalibrate_after: bool,
    seed: u64,
    observer: &mut dyn Observer,
) -> Result<PipelineOutput> {
    let encoder = EncoderConfig {
        seed,
        ..encoder.clone()
    };
    let mut model = LayeredModel::new(encoder).map_err(|e| e.in_phase("model construction"))?;

    let mut rng = stream_rng(seed, Stream::Warmup);
    let warmup = warmup_train(
        &mut model,
        &corpus.train,
        &corpus.validation,
        warmup_cfg,
        training,
        &mut rng,
        observer,
    )
    .map_err(|e| e.in_phase("warm-up"))?;
    let warmup_model = model.clone();
    let source_idx = warmup.selection.source_idx;
    info!(
        "warm-up done after {} epochs: source layer {source_idx}, {} ambiguous samples",
        warmup.selection.epochs,
        warmup.ambiguity.ambiguous.len()
    );

    model.reset_to_initial().map_err(|e| e.in_phase("reset"))?;
    observer.observe(Stage::Reset, &model.params);

    let mut rng = stream_rng(seed, Stream::Distill);
    let lad = train_lad(&mut model, &corpus.train, training, distill_cfg, source_idx, &mut rng, observer)
        .map_err(|e| e.in_phase("distillation"))?;
    let lad_model = model.clone();
    let report = |m: &LayeredModel, tag: &str| -> Result<MetricsReport> {
        let metrics = evaluate(m, &corpus.eval, EvalMode::Deterministic)?;
        let mut r = MetricsReport::new(tag, seed, &corpus.eval, metrics);
        r.source_layer = Some(source_idx);
        Ok(r)
    };
    let lad_report = report(&lad_model, LAD_TAG).map_err(|e| e.in_phase("evaluation"))?;

    let (rc_model, recalibration, rc_report) = if recalibrate_after {
        let subset = corpus.train.subset(&warmup.ambiguity.ambiguous);
        let mut rng = stream_rng(seed, Stream::Recalibrate);
        let lr = distill_cfg.recalibration_learning_rate.unwrap_or(lad.final_learning_rate);
        info!("re-calibrating on {} samples at learning rate {lr:e}", subset.len());
        let outcome = recalibrate(&mut model, &subset, training, lr, &mut rng, observer)
            .map_err(|e| e.in_phase("re-calibration"))?;
        let r = report(&model, LAD_RC_TAG).map_err(|e| e.in_phase("evaluation"))?;
        (Some(model), Some(outcome), Some(r))
    } else {
        (None, None, None)
    };

    Ok(PipelineOutput {
        warmup_model,
        lad_model,
        rc_model,
        warmup,
        lad,
        recalibration,
        lad_report,
        rc_report,
    })
}

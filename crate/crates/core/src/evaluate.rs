//! Scoring predictions against gold ambiguity distributions, and the report
//! files every run emits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::predict_mc;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::metrics::{argmax, diff_metric, entropy, jsd, kl_divergence};
use crate::model::LayeredModel;
use crate::nn::softmax_with_temperature;
use crate::train::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    Deterministic,
    /// Mean of `passes` dropout-active forward passes, with dropout masks
    /// drawn from `seed`.
    MonteCarlo { passes: usize, seed: u64 },
    /// Main-classifier logits divided by a temperature before the softmax.
    Temperature(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    /// Mean `KL(gold || prediction)`.
    pub kl: f64,
    pub jsd: f64,
    pub accuracy: f64,
    pub diff: f64,
    pub mispredicted: usize,
    /// Mean entropy of the predictions.
    pub mean_entropy: f64,
}

/// Aggregates per-sample predictions against `(gold distribution, gold label)` pairs.
pub fn score(predictions: &[Vec<f64>], golds: &[(Vec<f64>, usize)]) -> Result<Metrics> {
    if predictions.is_empty() || predictions.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold entries",
            predictions.len(),
            golds.len()
        )));
    }
    let n = predictions.len() as f64;
    let (mut kl, mut js, mut hits, mut ent) = (0.0, 0.0, 0usize, 0.0);
    for (p, (g, label)) in predictions.iter().zip(golds) {
        kl += kl_divergence(g, p)?;
        js += jsd(g, p)?;
        ent += entropy(p);
        if argmax(p) == *label {
            hits += 1;
        }
    }
    let diff = diff_metric(predictions, golds)?;
    Ok(Metrics {
        samples: predictions.len(),
        kl: kl / n,
        jsd: js / n,
        accuracy: hits as f64 / n,
        diff: diff.value,
        mispredicted: diff.mispredicted,
        mean_entropy: ent / n,
    })
}

/// Main-classifier distributions for every sample of `split` under `mode`.
pub fn predict_split(model: &LayeredModel, split: &Split, mode: EvalMode) -> Result<Vec<Vec<f64>>> {
    let seqs = split.token_refs();
    match mode {
        EvalMode::Deterministic => Ok(model.predict(&seqs)?.into_iter().map(|o| o.main().to_vec()).collect()),
        EvalMode::MonteCarlo { passes, seed } => {
            let mut rng = stream_rng(seed, Stream::MonteCarlo);
            predict_mc(model, &seqs, passes, &mut rng)
        }
        EvalMode::Temperature(t) => model
            .predict(&seqs)?
            .iter()
            .map(|o| softmax_with_temperature(o.main_logits(), t))
            .collect(),
    }
}

/// Scores the model on a split carrying gold distributions. Never mutates the model.
pub fn evaluate(model: &LayeredModel, split: &Split, mode: EvalMode) -> Result<Metrics> {
    let golds = split.golds()?;
    let preds = predict_split(model, split, mode)?;
    score(&preds, &golds)
}

/// One `(method, corpus)` result as written to `report.txt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub eval_checksum: String,
    pub temperature: Option<f64>,
    pub mc_passes: Option<usize>,
    pub source_layer: Option<usize>,
    pub metrics: Metrics,
}

const REPORT_HEADER: &str = "# metrics report; logarithms are natural (log_base=e)";

impl MetricsReport {
    pub fn new(method: impl Into<String>, seed: u64, eval: &Split, metrics: Metrics) -> Self {
        MetricsReport {
            method: method.into(),
            seed,
            eval_checksum: eval.checksum(),
            temperature: None,
            mc_passes: None,
            source_layer: None,
            metrics,
        }
    }

    /// Flat `key=value` lines. Reals use the shortest representation that
    /// reads back to the same bits.
    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut s = format!("{REPORT_HEADER}\n");
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "method={}", self.method);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "log_base=e");
        let _ = writeln!(s, "samples={}", m.samples);
        let _ = writeln!(s, "jsd={:?}", m.jsd);
        let _ = writeln!(s, "kl={:?}", m.kl);
        let _ = writeln!(s, "accuracy={:?}", m.accuracy);
        let _ = writeln!(s, "diff={:?}", m.diff);
        let _ = writeln!(s, "mispredicted={}", m.mispredicted);
        let _ = writeln!(s, "mean_entropy={:?}", m.mean_entropy);
        let _ = writeln!(s, "temperature={}", opt(self.temperature.map(|t| format!("{t:?}"))));
        let _ = writeln!(s, "mc_passes={}", opt(self.mc_passes.map(|k| k.to_string())));
        let _ = writeln!(s, "source_layer={}", opt(self.source_layer.map(|l| l.to_string())));
        let _ = writeln!(s, "eval_checksum={}", self.eval_checksum);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line without `=`: {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("report is missing `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("report field `{k}`: cannot parse `{v}`")))
        }
        fn opt<T: std::str::FromStr>(k: &str, v: String) -> Result<Option<T>> {
            if v == "-" {
                Ok(None)
            } else {
                num(k, v).map(Some)
            }
        }
        if get("log_base")? != "e" {
            return Err(Error::Format("report uses an unsupported log base".into()));
        }
        Ok(MetricsReport {
            method: get("method")?,
            seed: num("seed", get("seed")?)?,
            eval_checksum: get("eval_checksum")?,
            temperature: opt("temperature", get("temperature")?)?,
            mc_passes: opt("mc_passes", get("mc_passes")?)?,
            source_layer: opt("source_layer", get("source_layer")?)?,
            metrics: Metrics {
                samples: num("samples", get("samples")?)?,
                kl: num("kl", get("kl")?)?,
                jsd: num("jsd", get("jsd")?)?,
                accuracy: num("accuracy", get("accuracy")?)?,
                diff: num("diff", get("diff")?)?,
                mispredicted: num("mispredicted", get("mispredicted")?)?,
                mean_entropy: num("mean_entropy", get("mean_entropy")?)?,
            },
        })
    }

    pub const CSV_HEADER: &'static str = "method,seed,samples,jsd,kl,accuracy,diff,mispredicted,mean_entropy,temperature,mc_passes,eval_checksum";

    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{:?},{:?},{:?},{:?},{},{:?},{},{},{}",
            self.method,
            self.seed,
            m.samples,
            m.jsd,
            m.kl,
            m.accuracy,
            m.diff,
            m.mispredicted,
            m.mean_entropy,
            self.temperature.map(|t| format!("{t:?}")).unwrap_or_default(),
            self.mc_passes.map(|k| k.to_string()).unwrap_or_default(),
            self.eval_checksum
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golds() -> Vec<(Vec<f64>, usize)> {
        vec![
            (vec![0.7, 0.2, 0.1], 0),
            (vec![0.1, 0.5, 0.4], 1),
            (vec![0.3, 0.3, 0.4], 2),
        ]
    }

    #[test]
    fn exact_gold_predictions_score_zero_distance() {
        let g = golds();
        let preds: Vec<Vec<f64>> = g.iter().map(|(d, _)| d.clone()).collect();
        let m = score(&preds, &g).unwrap();
        assert_eq!(m.kl, 0.0);
        assert_eq!(m.jsd, 0.0);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.mispredicted, 0);
    }

    #[test]
    fn uniform_predictions_give_log_c_minus_entropy() {
        let g = golds();
        let preds = vec![vec![1.0 / 3.0; 3]; 3];
        let m = score(&preds, &g).unwrap();
        let expect = g.iter().map(|(d, _)| 3f64.ln() - entropy(d)).sum::<f64>() / 3.0;
        assert!((m.kl - expect).abs() < 1e-12);
        assert!((m.mean_entropy - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn report_text_round_trip_is_exact() {
        let r = MetricsReport {
            method: "LAD + RC".into(),
            seed: 9,
            eval_checksum: "ab12".into(),
            temperature: Some(1.75),
            mc_passes: None,
            source_layer: Some(4),
            metrics: Metrics {
                samples: 500,
                kl: 0.1 + 0.2,
                jsd: 1.0 / 3.0,
                accuracy: 0.874,
                diff: 0.412_345_678_901_234_5,
                mispredicted: 63,
                mean_entropy: 0.5,
            },
        };
        let back = MetricsReport::from_text(&r.to_text()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_text().contains("log_base=e"));
        assert!(MetricsReport::from_text("method=x\n").is_err());
    }
}

//! Comparison methods: ordinary one-hot training (ORD), label smoothing (LS),
//! Monte Carlo dropout (MC), temperature scaling (TS) and label distribution
//! learning (LDL). None of them use probes or warm-up.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::metrics::kl_divergence;
use crate::model::LayeredModel;
use crate::nn::{one_hot, softmax_with_temperature};
use crate::train::{train_main_network, TrainingConfig};

/// Evenly spaced temperatures `start, start + step, ..., stop`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for TemperatureGrid {
    fn default() -> Self {
        TemperatureGrid {
            start: 0.25,
            stop: 4.0,
            step: 0.25,
        }
    }
}

impl TemperatureGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.start.is_finite()) {
            return Err(Error::config("temperature_grid.start", "must be positive"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config("temperature_grid.step", "must be positive"));
        }
        if !(self.stop >= self.start && self.stop.is_finite()) {
            return Err(Error::config("temperature_grid.stop", "must be at least start"));
        }
        Ok(())
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| self.start + i as f64 * self.step).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Probability mass `α` label smoothing spreads over all classes.
    pub label_smoothing: f64,
    /// Stochastic forward passes `k` averaged by MC dropout.
    pub mc_passes: usize,
    pub temperature_grid: TemperatureGrid,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            label_smoothing: 0.1,
            mc_passes: 10,
            temperature_grid: TemperatureGrid::default(),
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_smoothing > 0.0 && self.label_smoothing < 1.0) {
            return Err(Error::config("label_smoothing", "must lie in (0, 1)"));
        }
        if self.mc_passes == 0 {
            return Err(Error::config("mc_passes", "must be at least 1"));
        }
        self.temperature_grid.validate()
    }
}

/// Plain one-hot cross-entropy on the main network. Returns per-epoch mean losses.
pub fn train_ord(
    model: &mut LayeredModel,
    train: &Split,
    training: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let c = model.num_classes();
    train_main_network(model, train, training, rng, |s| Ok(one_hot(s.label, c)))
}

/// `(1 - α) · onehot(label) + α / C`.
pub fn smoothed_target(label: usize, classes: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config("label_smoothing", format!("{alpha} is outside [0, 1)")));
    }
    if label >= classes {
        return Err(Error::Invalid(format!("label {label} outside {classes} classes")));
    }
    Ok(one_hot(label, classes)
        .into_iter()
        .map(|y| (1.0 - alpha) * y + alpha / classes as f64)
        .collect())
}

pub fn train_ls(
    model: &mut LayeredModel,
    train: &Split,
    training: &TrainingConfig,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let c = model.num_classes();
    smoothed_target(0, c, alpha)?;
    train_main_network(model, train, training, rng, |s| smoothed_target(s.label, c, alpha))
}

/// Cross-entropy against each training sample's gold distribution.
pub fn train_ldl(
    model: &mut LayeredModel,
    train: &Split,
    training: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if let Some(s) = train.samples.iter().find(|s| s.gold.is_none()) {
        return Err(Error::Invalid(format!(
            "label distribution learning needs gold distributions; sample {} has none",
            s.id
        )));
    }
    train_main_network(model, train, training, rng, |s| Ok(s.gold.clone().expect("checked above")))
}

/// Mean main-classifier distribution over `k` dropout-active forward passes.
pub fn predict_mc(model: &LayeredModel, sequences: &[&[u32]], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::config("mc_passes", "must be at least 1"));
    }
    let mut sum = vec![vec![0.0; model.num_classes()]; sequences.len()];
    for _ in 0..k {
        for (acc, p) in sum.iter_mut().zip(model.predict_stochastic(sequences, rng)?) {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
    }
    for row in &mut sum {
        for v in row.iter_mut() {
            *v /= k as f64;
        }
    }
    Ok(sum)
}

/// `softmax(logits / T)`.
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    softmax_with_temperature(logits, temperature)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    /// Mean validation `KL(gold || softmax(logits / T))` at the chosen `T`.
    pub kl: f64,
}

/// Grid search for the temperature minimising mean `KL(gold || softmax(z / T))`;
/// the first grid point wins ties.
pub fn fit_temperature_from_logits(logits: &[Vec<f64>], golds: &[Vec<f64>], grid: &TemperatureGrid) -> Result<TemperatureFit> {
    if logits.is_empty() || logits.len() != golds.len() {
        return Err(Error::Shape(format!("{} logit rows for {} gold distributions", logits.len(), golds.len())));
    }
    let mut best: Option<TemperatureFit> = None;
    for t in grid.values()? {
        let mut kl = 0.0;
        for (z, g) in logits.iter().zip(golds) {
            kl += kl_divergence(g, &apply_temperature(z, t)?)?;
        }
        kl /= logits.len() as f64;
        if best.is_none_or(|b| kl < b.kl) {
            best = Some(TemperatureFit { temperature: t, kl });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Fits the main classifier's temperature on a split with gold distributions.
pub fn fit_temperature(model: &LayeredModel, validation: &Split, grid: &TemperatureGrid) -> Result<TemperatureFit> {
    let golds: Vec<Vec<f64>> = validation.golds()?.into_iter().map(|(g, _)| g).collect();
    let logits: Vec<Vec<f64>> = model
        .predict(&validation.token_refs())?
        .into_iter()
        .map(|o| o.main_logits().to_vec())
        .collect();
    fit_temperature_from_logits(&logits, &golds, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::argmax;
    use crate::nn::softmax;

    #[test]
    fn smoothing_examples() {
        let t = smoothed_target(0, 3, 0.1).unwrap();
        assert!((t[0] - 0.933_333_333_333_333_4).abs() < 1e-12);
        assert!((t[1] - 0.033_333_333_333_333_3).abs() < 1e-12);
        assert_eq!(smoothed_target(2, 3, 0.0).unwrap(), vec![0.0, 0.0, 1.0]);
        for c in 2..7 {
            for a in [0.05, 0.3, 0.9] {
                assert!((smoothed_target(c - 1, c, a).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(smoothed_target(0, 3, 1.0).is_err());
        assert!(smoothed_target(0, 3, -0.1).is_err());
    }

    #[test]
    fn temperature_examples() {
        let p = apply_temperature(&[2.0, 0.0], 2.0).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let z = [1.5, -0.3, 0.2];
        assert_eq!(apply_temperature(&z, 1.0).unwrap(), softmax(&z).unwrap());
        let hot = apply_temperature(&z, 1e9).unwrap();
        assert!(hot.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
        assert!(apply_temperature(&z, 0.0).is_err());
        for t in [0.1, 0.5, 3.0, 40.0] {
            assert_eq!(argmax(&apply_temperature(&z, t).unwrap()), argmax(&z));
        }
    }

    #[test]
    fn grid_values() {
        let g = TemperatureGrid::default().values().unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], 0.25);
        assert_eq!(*g.last().unwrap(), 4.0);
        assert!(TemperatureGrid { step: 0.0, ..TemperatureGrid::default() }.values().is_err());
    }

    fn calibrated_logits() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let logits: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let a = (i as f64 * 0.37).sin() * 2.0;
                let b = (i as f64 * 0.71).cos() * 1.5;
                vec![a, b, 0.3 * a - b]
            })
            .collect();
        let golds = logits.iter().map(|z| softmax(z).unwrap()).collect();
        (logits, golds)
    }

    #[test]
    fn calibrated_model_fits_unit_temperature() {
        let (logits, golds) = calibrated_logits();
        let fit = fit_temperature_from_logits(&logits, &golds, &TemperatureGrid::default()).unwrap();
        assert_eq!(fit.temperature, 1.0);
        assert!(fit.kl.abs() < 1e-12);
    }

    #[test]
    fn doubled_logits_fit_temperature_two() {
        let (logits, golds) = calibrated_logits();
        let doubled: Vec<Vec<f64>> = logits.iter().map(|z| z.iter().map(|v| 2.0 * v).collect()).collect();
        let fit = fit_temperature_from_logits(&doubled, &golds, &TemperatureGrid::default()).unwrap();
        assert!((fit.temperature - 2.0).abs() <= 0.25, "{fit:?}");
    }
}

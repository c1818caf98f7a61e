//! Vector-level softmax and cross-entropy used outside the recorded graph.

use super::graph::PROB_FLOOR;
use super::kernels;
use crate::error::{Error, Result};

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Invalid("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = logits.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

/// `softmax(logits / temperature)`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    softmax(&scaled)
}

/// `-Σ target_i · ln(max(pred_i, 1e-12))`; prediction first, target second.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "cross entropy of lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(-pred
        .iter()
        .zip(target)
        .map(|(p, t)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

pub fn uniform(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

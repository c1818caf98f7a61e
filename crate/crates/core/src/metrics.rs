//! Distribution distances and calibration metrics. Natural log throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PROB_FLOOR;

/// Upper bound of [`jsd`] under the natural log: `sqrt(ln 2)`.
pub fn jsd_bound() -> f64 {
    std::f64::consts::LN_2.sqrt()
}

fn same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    Ok(())
}

/// `KL(p || q) = Σ p_i ln(p_i / q_i)`, with `q` floored at 1e-12 and terms
/// where `p_i = 0` contributing nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum::<f64>())
}

/// Jensen-Shannon distance `sqrt(½ KL(p||m) + ½ KL(q||m))`, `m = (p + q) / 2`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let d = 0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?;
    Ok(d.max(0.0).sqrt())
}

/// Shannon entropy `-Σ p_i ln p_i` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffResult {
    /// Mean `|gold[gt] - pred[gt]|` over mispredicted samples; 0 if there are none.
    pub value: f64,
    pub mispredicted: usize,
}

impl DiffResult {
    pub fn no_mispredictions(&self) -> bool {
        self.mispredicted == 0
    }
}

/// Mean absolute gap between the gold and predicted probability of the gold
/// label, over samples whose predicted argmax is not the gold label.
pub fn diff_metric(predictions: &[Vec<f64>], golds: &[(Vec<f64>, usize)]) -> Result<DiffResult> {
    if predictions.is_empty() {
        return Err(Error::Invalid("diff metric of an empty set".into()));
    }
    if predictions.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold entries",
            predictions.len(),
            golds.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (pred, (gold, label)) in predictions.iter().zip(golds) {
        same_len(pred, gold)?;
        if *label >= pred.len() {
            return Err(Error::Invalid(format!("gold label {label} outside {} classes", pred.len())));
        }
        if argmax(pred) != *label {
            sum += (gold[*label] - pred[*label]).abs();
            count += 1;
        }
    }
    Ok(DiffResult {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        mispredicted: count,
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    same_len(xs, ys)?;
    if xs.len() < 2 {
        return Err(Error::Invalid("pearson needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("pearson of a zero-variance input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!(close(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-12));
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!(close(got, expect, 1e-12));
        assert!(close(got, 0.1438, 1e-4));
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_with_zero_prediction_stays_finite() {
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite());
        assert!(close(v, 0.5 * (0.5 / 1e-12f64).ln() + 0.5 * 0.5f64.ln(), 1e-9));
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(close(v, 2f64.ln().sqrt(), 1e-12));
        assert!(close(v, 0.8326, 1e-4));
    }

    #[test]
    fn entropy_examples() {
        assert!(close(entropy(&[1.0 / 3.0; 3]), 3f64.ln(), 1e-12));
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!(close(entropy(&[0.5, 0.25, 0.25]), 1.5 * 2f64.ln(), 1e-12));
    }

    #[test]
    fn diff_examples() {
        let preds = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let golds = vec![(vec![0.7, 0.3], 0), (vec![0.1, 0.9], 1)];
        let d = diff_metric(&preds, &golds).unwrap();
        assert!(d.no_mispredictions());
        assert_eq!(d.value, 0.0);

        let preds = vec![vec![0.1, 0.9], vec![0.2, 0.8]];
        let golds = vec![(vec![0.6, 0.4], 0), (vec![0.1, 0.9], 1)];
        let d = diff_metric(&preds, &golds).unwrap();
        assert_eq!(d.mispredicted, 1);
        assert!(close(d.value, 0.5, 1e-12));

        assert!(diff_metric(&[], &[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!(close(pearson(&xs, &ys).unwrap(), 1.0, 1e-12));
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!(close(pearson(&xs, &neg).unwrap(), -1.0, 1e-12));
        assert!(close(pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5, 1e-12));
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_self(p in simplex(4), q in simplex(4)) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        }

        #[test]
        fn jsd_symmetric_and_bounded(p in simplex(5), q in simplex(5)) {
            let a = jsd(&p, &q).unwrap();
            let b = jsd(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a <= jsd_bound() + 1e-12);
        }
    }
}

//! Source-layer selection, level of ambiguity and ambiguous-sample extraction.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// The 1-based layer `i` maximising `e[i] - e[i+1]` over a per-layer entropy
/// profile; ties go to the smallest `i`.
pub fn select_source_layer(entropies: &[f64]) -> Result<usize> {
    if entropies.len() < 2 {
        return Err(Error::Invalid(format!(
            "source selection needs at least 2 layers, got {}",
            entropies.len()
        )));
    }
    if let Some(i) = entropies.iter().position(|e| !e.is_finite()) {
        return Err(Error::NonFinite(format!("entropy of layer {}", i + 1)));
    }
    let mut best = 0;
    let mut best_drop = f64::NEG_INFINITY;
    for (i, w) in entropies.windows(2).enumerate() {
        let drop = w[0] - w[1];
        if drop > best_drop {
            best = i;
            best_drop = drop;
        }
    }
    Ok(best + 1)
}

/// Level of ambiguity: the mean ground-truth confidence over layers
/// `source_idx..=L` (1-based), where `confidences[l - 1]` belongs to layer `l`.
pub fn compute_la(confidences: &[f64], source_idx: usize) -> Result<f64> {
    let l = confidences.len();
    if source_idx == 0 || source_idx > l {
        return Err(Error::Invalid(format!("source layer {source_idx} outside 1..={l}")));
    }
    let tail = &confidences[source_idx - 1..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Ids of the `round(m · N)` lowest scores, ties broken by ascending id.
pub fn extract_ambiguous(scores: &BTreeMap<u64, f64>, m: f64) -> Result<BTreeSet<u64>> {
    if scores.is_empty() {
        return Err(Error::Invalid("no scores to extract from".into()));
    }
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::config("ambiguous_fraction", format!("{m} is outside (0, 1)")));
    }
    let k = (m * scores.len() as f64).round() as usize;
    if k == 0 {
        return Err(Error::Invalid(format!(
            "fraction {m} of {} samples rounds to an empty set",
            scores.len()
        )));
    }
    if let Some((id, _)) = scores.iter().find(|(_, s)| s.is_nan()) {
        return Err(Error::NonFinite(format!("score of sample {id}")));
    }
    let mut ranked: Vec<(u64, f64)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(id, _)| id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn selection_examples() {
        assert_eq!(select_source_layer(&[1.05, 1.02, 0.98, 0.95, 0.40, 0.35]).unwrap(), 4);
        assert_eq!(select_source_layer(&[1.0, 0.5, 0.5, 0.0]).unwrap(), 1);
        assert_eq!(select_source_layer(&[0.25, 0.5, 0.75]).unwrap(), 1);
        assert!(select_source_layer(&[1.0]).is_err());
        assert!(select_source_layer(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn la_examples() {
        assert!((compute_la(&[0.1, 0.2, 0.6, 0.9], 3).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(compute_la(&[1.0; 5], 2).unwrap(), 1.0);
        let la = compute_la(&[0.9, 0.8, 0.7, 0.2, 0.3, 0.4], 4).unwrap();
        assert!((la - 0.3).abs() < 1e-12);
        assert!(compute_la(&[0.5, 0.5], 0).is_err());
        assert!(compute_la(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn extraction_examples() {
        let mut scores: BTreeMap<u64, f64> = (0..10).map(|i| (i, 0.5 + i as f64 * 0.01)).collect();
        scores.insert(7, 0.1);
        assert_eq!(extract_ambiguous(&scores, 0.1).unwrap(), BTreeSet::from([7]));

        let flat: BTreeMap<u64, f64> = (0..20).rev().map(|i| (i * 3, 0.4)).collect();
        assert_eq!(extract_ambiguous(&flat, 0.1).unwrap(), BTreeSet::from([0, 3]));

        let small: BTreeMap<u64, f64> = (0..4).map(|i| (i, 0.1)).collect();
        assert!(extract_ambiguous(&small, 0.1).is_err());
        assert!(extract_ambiguous(&small, 1.0).is_err());
        assert!(extract_ambiguous(&BTreeMap::new(), 0.5).is_err());
    }

    proptest! {
        #[test]
        fn la_is_monotone_in_each_confidence(
            conf in prop::collection::vec(0.0f64..1.0, 2..8),
            layer in 0usize..8,
            bump in 0.0f64..1.0,
            src in 1usize..8,
        ) {
            let l = conf.len();
            let (layer, src) = (layer % l, (src - 1) % l + 1);
            let mut raised = conf.clone();
            raised[layer] = (raised[layer] + bump).min(1.0);
            prop_assert!(compute_la(&raised, src).unwrap() >= compute_la(&conf, src).unwrap());
        }

        #[test]
        fn extraction_size_is_exact(n in 1usize..400, m in 0.01f64..0.99) {
            let scores: BTreeMap<u64, f64> = (0..n as u64).map(|i| (i, ((i * 37) % 11) as f64)).collect();
            let k = (m * n as f64).round() as usize;
            match extract_ambiguous(&scores, m) {
                Ok(set) => {
                    prop_assert_eq!(set.len(), k);
                    let max_in = set.iter().map(|id| scores[id]).fold(f64::NEG_INFINITY, f64::max);
                    let min_out = scores.iter().filter(|(id, _)| !set.contains(id)).map(|(_, &s)| s).fold(f64::INFINITY, f64::min);
                    prop_assert!(max_in <= min_out);
                }
                Err(_) => prop_assert_eq!(k, 0),
            }
        }
    }
}

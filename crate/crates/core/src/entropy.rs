//! Prediction entropy and representative selection.
//!
//! Examples that the classifier is most certain about (lowest entropy over
//! its softmax output) stand in as reconstruction targets for every other
//! member of their (class, cluster) group.

use crate::error::{Error, Result};
use crate::scalar::Element;
use std::collections::BTreeMap;

/// Shannon entropy `-sum p ln p` in nats, accumulated in f64.
///
/// The input must be a probability vector: nonnegative entries summing to 1
/// within 1e-5. Zero entries contribute zero.
pub fn prediction_entropy<E: Element>(probs: &[E]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Entropy("empty probability vector".into()));
    }
    let mut sum = 0.0f64;
    for &p in probs {
        let p = p.to_f64();
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Entropy(format!("invalid probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Entropy(format!("probabilities sum to {sum}, not 1")));
    }
    let mut h = 0.0f64;
    for &p in probs {
        let p = p.to_f64();
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h.max(0.0))
}

/// Largest achievable entropy for a `classes`-way prediction.
pub fn entropy_upper_bound(classes: usize) -> f64 {
    (classes as f64).ln()
}

/// One scored example: its label, its cluster within that label, and the
/// entropy of the classifier's prediction for it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredExample {
    pub class: usize,
    pub cluster: usize,
    pub entropy: f64,
}

/// Picks, for every (class, cluster) pair present, the example with the
/// lowest prediction entropy. Ties go to the lowest example index.
pub fn select_representatives(scored: &[ScoredExample]) -> BTreeMap<(usize, usize), usize> {
    let mut best: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, ex) in scored.iter().enumerate() {
        let key = (ex.class, ex.cluster);
        match best.get(&key) {
            Some(&cur) if scored[cur].entropy <= ex.entropy => {}
            _ => {
                best.insert(key, i);
            }
        }
    }
    best
}

/// Maps every example to the index of its group representative.
pub fn conversion_targets(
    scored: &[ScoredExample],
    representatives: &BTreeMap<(usize, usize), usize>,
) -> Result<Vec<usize>> {
    scored
        .iter()
        .map(|ex| {
            representatives
                .get(&(ex.class, ex.cluster))
                .copied()
                .ok_or_else(|| {
                    Error::Prerequisite(format!(
                        "no representative for class {} cluster {}",
                        ex.class, ex.cluster
                    ))
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_hits_the_upper_bound() {
        let h = prediction_entropy(&[0.25f32; 4]).unwrap();
        assert_relative_eq!(h, 4.0f64.ln(), epsilon = 1e-6);
        assert_relative_eq!(entropy_upper_bound(4), 4.0f64.ln());
    }

    #[test]
    fn one_hot_has_zero_entropy() {
        let h = prediction_entropy(&[0.0f32, 1.0, 0.0]).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn two_way_split_is_ln2() {
        let h = prediction_entropy(&[0.5f64, 0.5]).unwrap();
        assert_relative_eq!(h, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn malformed_vectors_are_rejected() {
        assert!(prediction_entropy::<f32>(&[]).is_err());
        assert!(prediction_entropy(&[0.5f32, 0.6]).is_err());
        assert!(prediction_entropy(&[-0.1f32, 1.1]).is_err());
        assert!(prediction_entropy(&[f32::NAN, 1.0]).is_err());
    }

    #[test]
    fn representatives_take_lowest_entropy_then_lowest_index() {
        let scored = vec![
            ScoredExample { class: 0, cluster: 0, entropy: 0.9 },
            ScoredExample { class: 0, cluster: 0, entropy: 0.2 },
            ScoredExample { class: 0, cluster: 1, entropy: 0.5 },
            ScoredExample { class: 1, cluster: 0, entropy: 0.4 },
            ScoredExample { class: 1, cluster: 0, entropy: 0.4 },
        ];
        let reps = select_representatives(&scored);
        assert_eq!(reps[&(0, 0)], 1);
        assert_eq!(reps[&(0, 1)], 2);
        // tie at 0.4 goes to index 3
        assert_eq!(reps[&(1, 0)], 3);

        let targets = conversion_targets(&scored, &reps).unwrap();
        assert_eq!(targets, vec![1, 1, 2, 3, 3]);
    }

    #[test]
    fn missing_group_is_an_error() {
        let scored = vec![ScoredExample { class: 2, cluster: 1, entropy: 0.1 }];
        let reps = BTreeMap::new();
        assert!(conversion_targets(&scored, &reps).is_err());
    }

    proptest! {
        #[test]
        fn entropy_stays_within_bounds(raw in proptest::collection::vec(1e-3f64..1.0, 1..12)) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let h = prediction_entropy(&probs).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= entropy_upper_bound(probs.len()) + 1e-9);
        }

        #[test]
        fn every_representative_minimizes_its_group(
            entries in proptest::collection::vec((0usize..3, 0usize..3, 0.0f64..2.0), 1..40)
        ) {
            let scored: Vec<ScoredExample> = entries
                .iter()
                .map(|&(class, cluster, entropy)| ScoredExample { class, cluster, entropy })
                .collect();
            let reps = select_representatives(&scored);
            for (i, ex) in scored.iter().enumerate() {
                let rep = reps[&(ex.class, ex.cluster)];
                prop_assert!(scored[rep].entropy <= ex.entropy + 1e-15);
                if scored[rep].entropy == ex.entropy {
                    prop_assert!(rep <= i);
                }
            }
        }
    }
}

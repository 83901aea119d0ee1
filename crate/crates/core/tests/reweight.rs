use std::collections::BTreeSet;

use fedreweight::protocol::GlobalFrequencyVector;
use fedreweight::reweight::*;
use proptest::prelude::*;

proptest! {
    #[test]
    fn batch_loss_is_scale_invariant(
        pairs in prop::collection::vec((0.001f64..100.0, 0.0f64..20.0), 1..64),
        c in 1e-4f64..1e4,
    ) {
        let (w, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
        let a = weighted_batch_loss(&w, &l).unwrap();
        let b = weighted_batch_loss(&scaled, &l).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn batch_loss_is_a_convex_combination(pairs in prop::collection::vec((0.001f64..100.0, 0.0f64..20.0), 1..64)) {
        let (w, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let x = weighted_batch_loss(&w, &l).unwrap();
        let (lo, hi) = l.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
    }

    #[test]
    fn batch_loss_ignores_order(pairs in prop::collection::vec((0.001f64..100.0, 0.0f64..20.0), 1..64)) {
        let (w, l): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let (wr, lr): (Vec<f64>, Vec<f64>) = pairs.iter().rev().copied().unzip();
        let a = weighted_batch_loss(&w, &l).unwrap();
        let b = weighted_batch_loss(&wr, &lr).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn weights_are_bounded_and_monotone(counts in prop::collection::vec(1u64..1_000_000, 1..50)) {
        let g = GlobalFrequencyVector { client_id: 0, counts: counts.clone(), rounds_applied: BTreeSet::new() };
        let w = weights_from_frequencies(&g, DEFAULT_EPSILON).unwrap();
        let cap = 1.0 / (2f64.ln() + DEFAULT_EPSILON);
        for (i, &wi) in w.weights.iter().enumerate() {
            prop_assert!(wi > 0.0 && wi <= cap);
            for (j, &wj) in w.weights.iter().enumerate() {
                if counts[i] < counts[j] {
                    prop_assert!(wi > wj);
                }
            }
        }
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn reference_values() {
    assert!((weight_for_count(1, DEFAULT_EPSILON) - 1.442695).abs() < 1e-6);
    assert!((weight_for_count(3, DEFAULT_EPSILON) - 0.721348).abs() < 1e-6);
    let r = weight_for_count(1, DEFAULT_EPSILON) / weight_for_count(3, DEFAULT_EPSILON);
    assert!((r - 2.0).abs() / 2.0 < 1e-7);
}

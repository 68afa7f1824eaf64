use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdl_core::train::{auc_roc, mae};

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn instance(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..200);
    // Coarse scores force plenty of ties.
    let levels = rng.gen_range(2..20);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.25).collect();
    (scores, labels)
}

#[test]
fn auc_matches_pair_counting_with_ties() {
    for seed in 0..100 {
        let (s, l) = instance(seed);
        let got = auc_roc(&s, &l).unwrap();
        assert!((got - pair_auc(&s, &l)).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn auc_extremes() {
    assert_eq!(auc_roc(&[0.1, 0.2, 0.9, 0.8], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(auc_roc(&[0.9, 0.8, 0.1, 0.2], &[false, false, true, true]).unwrap(), 0.0);
    assert_eq!(auc_roc(&[0.5; 4], &[false, true, true, false]).unwrap(), 0.5);
    assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn mae_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(1..300);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let mut total = 0.0;
        for i in 0..n {
            total += if p[i] > t[i] { p[i] - t[i] } else { t[i] - p[i] };
        }
        assert!((mae(&p, &t).unwrap() - total / n as f64).abs() < 1e-12);
    }
    assert!(mae(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_maps(seed in 0u64..10_000) {
        let (s, l) = instance(seed);
        let mapped: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert!((auc_roc(&s, &l).unwrap() - auc_roc(&mapped, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_flips_under_negation(seed in 0u64..10_000) {
        let (s, l) = instance(seed);
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auc_roc(&s, &l).unwrap() + auc_roc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mae_is_translation_invariant(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50),
        shift in -100.0f64..100.0,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ps: Vec<f64> = p.iter().map(|x| x + shift).collect();
        let ts: Vec<f64> = t.iter().map(|x| x + shift).collect();
        prop_assert!((mae(&p, &t).unwrap() - mae(&ps, &ts).unwrap()).abs() < 1e-9);
        prop_assert!(mae(&p, &t).unwrap() >= 0.0);
    }
}

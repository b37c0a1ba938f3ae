use std::collections::HashSet;

use proptest::prelude::*;
use segnl_core::metrics::{
    auc, bootstrap_pvalue, dsc_per_subject, dsc_pooled, roc_curve, Overlap, Scored, Selector,
};
use segnl_core::LabelMap;

fn labels(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=2, 1..max_len)
}

fn pair(max_len: usize) -> impl Strategy<Value = (LabelMap, LabelMap)> {
    labels(max_len).prop_flat_map(|a| {
        let n = a.len();
        (Just(a), prop::collection::vec(0u8..=2, n))
    })
    .prop_map(|(a, b)| (lm(a), lm(b)))
}

fn lm(data: Vec<u8>) -> LabelMap {
    LabelMap::new([data.len(), 1, 1], [1.0; 3], data).unwrap()
}

fn set_dice(r: &LabelMap, x: &LabelMap, sel: Selector) -> f64 {
    let pick = |m: &LabelMap| -> HashSet<usize> {
        m.data.iter().enumerate().filter(|(_, &l)| sel.is_positive(l)).map(|(i, _)| i).collect()
    };
    let (a, b) = (pick(r), pick(x));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// P(score of a random positive > random negative), ties half.
fn mann_whitney(samples: &[Scored]) -> f64 {
    let pos: Vec<f32> = samples.iter().filter(|s| s.positive).map(|s| s.score).collect();
    let neg: Vec<f32> = samples.iter().filter(|s| !s.positive).map(|s| s.score).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Threshold bucket of a score on the `k / 199` grid used by a 200-point curve.
fn bucket(score: f32) -> f32 {
    let v = f64::from(score) * 199.0;
    let mut k = v.floor();
    if (k + 1.0) / 199.0 <= f64::from(score) {
        k += 1.0;
    }
    k as f32
}

fn score_sets(min: usize, max: usize) -> impl Strategy<Value = Vec<Scored>> {
    (prop::collection::vec(0.0f32..=1.0, min..max), prop::collection::vec(0.0f32..=1.0, min..max)).prop_map(|(p, n)| {
        p.into_iter()
            .map(|s| Scored { score: s, positive: true })
            .chain(n.into_iter().map(|s| Scored { score: s, positive: false }))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dice_matches_set_oracle((r, x) in pair(64)) {
        for sel in Selector::ALL {
            prop_assert_eq!(dsc_per_subject(&r, &x, sel).unwrap(), set_dice(&r, &x, sel));
        }
    }

    #[test]
    fn dice_is_symmetric((r, x) in pair(64)) {
        for sel in Selector::ALL {
            prop_assert_eq!(dsc_per_subject(&r, &x, sel).unwrap(), dsc_per_subject(&x, &r, sel).unwrap());
        }
    }

    #[test]
    fn pooled_of_one_is_per_subject((r, x) in pair(64)) {
        for sel in Selector::ALL {
            let pooled = dsc_pooled(std::slice::from_ref(&r), std::slice::from_ref(&x), sel).unwrap();
            prop_assert_eq!(pooled, dsc_per_subject(&r, &x, sel).unwrap());
            prop_assert_eq!(Overlap::of(&r, &x, sel).unwrap().dsc(), pooled);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn roc_is_monotone_with_fixed_endpoints(samples in score_sets(1, 60)) {
        let curve = roc_curve(&samples, 200).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0].threshold >= w[1].threshold));
        prop_assert!(curve.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        let (first, last) = (curve[0], curve[curve.len() - 1]);
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    /// Exact: pairs sharing a threshold bucket are ties for the binned curve.
    #[test]
    fn auc_is_rank_statistic_of_bucketed_scores(samples in score_sets(1, 60)) {
        let a = auc(&roc_curve(&samples, 200).unwrap()).unwrap();
        let binned: Vec<Scored> = samples.iter().map(|s| Scored { score: bucket(s.score), ..*s }).collect();
        prop_assert!((a - mann_whitney(&binned)).abs() <= 1e-12, "auc {} vs {}", a, mann_whitney(&binned));
    }

    #[test]
    fn auc_matches_rank_statistic(samples in score_sets(200, 600)) {
        let a = auc(&roc_curve(&samples, 200).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - mann_whitney(&samples)).abs() <= 1.0 / 200.0, "auc {} vs {}", a, mann_whitney(&samples));
    }

    #[test]
    fn bootstrap_of_identical_lists_is_one_half(a in prop::collection::vec(0.0f64..=1.0, 2..12), seed: u64) {
        prop_assert_eq!(bootstrap_pvalue(&a, &a, 200, seed).unwrap(), 0.5);
    }
}

/// Exhaustive resample enumeration: A = [0.9, 0.9], B = [0.9, 0.1].
/// The four equiprobable index pairs give B-mean 0.9, 0.5, 0.5, 0.1 against
/// A-mean 0.9: one tie and three losses for B.
#[test]
fn bootstrap_matches_enumerated_resamples() {
    let (a, b) = ([0.9, 0.9], [0.9, 0.1]);
    let mut exact = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let (ma, mb) = ((a[i] + a[j]) / 2.0, (b[i] + b[j]) / 2.0);
            exact += if mb > ma { 1.0 } else if mb == ma { 0.5 } else { 0.0 };
        }
    }
    exact /= 4.0;
    assert_eq!(exact, 0.125);
    let mc = bootstrap_pvalue(&a, &b, 20_000, 11).unwrap();
    assert!((mc - exact).abs() <= 0.05, "monte carlo {mc} vs exact {exact}");
}

#[test]
fn strictly_better_method_has_zero_pvalue() {
    let a = [0.9, 0.8, 0.85, 0.95];
    let b = [0.7, 0.6, 0.80, 0.90];
    assert_eq!(bootstrap_pvalue(&a, &b, 1000, 0).unwrap(), 0.0);
    assert_eq!(bootstrap_pvalue(&b, &a, 1000, 0).unwrap(), 1.0);
}

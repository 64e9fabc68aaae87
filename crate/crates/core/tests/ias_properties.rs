mod common;

use hiast::data::{ProbMap, IGNORE};
use hiast::pseudolabel::{
    generate_pseudo_labels_classbalanced, generate_pseudo_labels_constant, generate_pseudo_labels_ias, selection_stats,
    IasParams,
};
use proptest::prelude::*;

/// Random probability maps from raw positive weights.
fn probmaps(c: usize, max_n: usize) -> impl Strategy<Value = Vec<ProbMap>> {
    let one = (1usize..4, 1usize..4).prop_flat_map(move |(h, w)| {
        prop::collection::vec(0.01f64..1.0, h * w * c).prop_map(move |raw| {
            let mut probs = raw;
            for px in probs.chunks_mut(c) {
                // Sharpen so that confident pixels occur.
                px.iter_mut().for_each(|v| *v = v.powi(4));
                let s: f64 = px.iter().sum();
                px.iter_mut().for_each(|v| *v /= s);
            }
            ProbMap::new(h, w, c, probs).unwrap()
        })
    });
    prop::collection::vec(one, 1..max_n)
}

fn params(alpha: f64, beta: f64, gamma: f64) -> IasParams {
    IasParams {
        alpha,
        beta,
        gamma,
        ..IasParams::default()
    }
}

fn selected(labels: &[hiast::data::LabelMap]) -> usize {
    labels
        .iter()
        .map(|l| l.labels().iter().filter(|&&v| v != IGNORE).count())
        .sum()
}

proptest! {
    #[test]
    fn labels_are_sound_against_the_trace(
        pms in probmaps(3, 6), alpha in 0.05f64..1.0, beta in 0.0f64..=1.0, gamma in 0.0f64..16.0,
    ) {
        let (labels, state) = generate_pseudo_labels_ias(&pms, 3, &params(alpha, beta, gamma), true).unwrap();
        let trace = state.trace.unwrap();
        prop_assert_eq!(trace.len(), pms.len());
        for ((pm, lm), entry) in pms.iter().zip(&labels).zip(&trace) {
            for (i, &l) in lm.labels().iter().enumerate() {
                let (c, p) = pm.argmax(i);
                if l == IGNORE {
                    prop_assert!(p <= entry.thresholds[c as usize]);
                } else {
                    prop_assert_eq!(l, c);
                    prop_assert!(p > entry.thresholds[c as usize]);
                }
            }
            for &t in &entry.thresholds {
                prop_assert!(t > 0.0 && t <= 1.0);
            }
        }
    }

    #[test]
    fn alpha_monotone_on_one_instance(
        pms in probmaps(3, 2), a in 0.05f64..1.0, b in 0.05f64..1.0, beta in 0.0f64..=1.0, gamma in 0.0f64..16.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let first = &pms[..1];
        let (l1, _) = generate_pseudo_labels_ias(first, 3, &params(lo, beta, gamma), false).unwrap();
        let (l2, _) = generate_pseudo_labels_ias(first, 3, &params(hi, beta, gamma), false).unwrap();
        prop_assert!(selected(&l1) <= selected(&l2));
    }

    #[test]
    fn alpha_monotone_on_sequences_without_decay(
        pms in probmaps(3, 6), a in 0.05f64..1.0, b in 0.05f64..1.0, beta in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (l1, _) = generate_pseudo_labels_ias(&pms, 3, &params(lo, beta, 0.0), false).unwrap();
        let (l2, _) = generate_pseudo_labels_ias(&pms, 3, &params(hi, beta, 0.0), false).unwrap();
        prop_assert!(selected(&l1) <= selected(&l2));
    }

    #[test]
    fn gamma_never_lowers_the_local_threshold_on_one_instance(
        pms in probmaps(3, 2), g1 in 0.0f64..32.0, g2 in 0.0f64..32.0, alpha in 0.05f64..1.0,
    ) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let first = &pms[..1];
        let (_, s1) = generate_pseudo_labels_ias(first, 3, &params(alpha, 0.0, lo), true).unwrap();
        let (_, s2) = generate_pseudo_labels_ias(first, 3, &params(alpha, 0.0, hi), true).unwrap();
        let (t1, t2) = (&s1.trace.unwrap()[0].local, &s2.trace.unwrap()[0].local);
        for (x, y) in t1.iter().zip(t2) {
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn frozen_thresholds_make_order_irrelevant(pms in probmaps(3, 6), alpha in 0.05f64..1.0, gamma in 0.0f64..16.0) {
        let p = params(alpha, 1.0, gamma);
        let (fwd, s1) = generate_pseudo_labels_ias(&pms, 3, &p, false).unwrap();
        let rev: Vec<&ProbMap> = pms.iter().rev().collect();
        let (mut back, s2) = generate_pseudo_labels_ias(&rev, 3, &p, false).unwrap();
        back.reverse();
        prop_assert_eq!(&fwd, &back);
        prop_assert_eq!(s1.thresholds, s2.thresholds);
        prop_assert_eq!(fwd, generate_pseudo_labels_constant(&pms, 0.9));
    }

    #[test]
    fn single_instance_matches_class_balanced(pms in probmaps(4, 2), alpha in 0.05f64..=1.0) {
        let first = &pms[..1];
        let (ias, _) = generate_pseudo_labels_ias(first, 4, &params(alpha, 0.0, 0.0), false).unwrap();
        let (cb, _) = generate_pseudo_labels_classbalanced(first, alpha).unwrap();
        prop_assert_eq!(ias, cb);
    }

    #[test]
    fn proportions_are_fractions(pms in probmaps(3, 5), alpha in 0.05f64..1.0) {
        let (labels, _) = generate_pseudo_labels_ias(&pms, 3, &params(alpha, 0.9, 8.0), false).unwrap();
        let s = selection_stats(&labels, None, 3).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.proportion));
        prop_assert!(s.diversity <= 3);
        let total: f64 = s.per_class_proportion.iter().sum();
        prop_assert!((total - s.proportion).abs() < 1e-12);
    }
}

#[test]
fn hand_trace_two_by_two() {
    let pm = ProbMap::new(2, 2, 2, vec![0.95, 0.05, 0.6, 0.4, 0.3, 0.7, 0.45, 0.55]).unwrap();
    let (labels, state) = generate_pseudo_labels_ias(&[pm], 2, &params(0.5, 0.9, 0.0), true).unwrap();
    let local = &state.trace.as_ref().unwrap()[0].local;
    assert_eq!(local, &vec![0.6, 0.55]);
    for (t, &psi) in state.thresholds.iter().zip(local) {
        assert!((t - (0.9 * 0.9 + 0.1 * psi)).abs() < 1e-15);
    }
    assert!((state.thresholds[0] - 0.87).abs() < 1e-12);
    assert!((state.thresholds[1] - 0.865).abs() < 1e-12);
    assert_eq!(labels[0].labels(), &[0, IGNORE, IGNORE, IGNORE]);
}

#[test]
fn hard_class_filtering_bias() {
    // Two classes with equal confidence lists; the lower threshold keeps
    // fewer pixels relative to its list length once decay kicks in.
    let confs = vec![0.99, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55];
    use hiast::pseudolabel::{local_threshold, SortedClassConfidences};
    let list = SortedClassConfidences::new(0, confs);
    let low = local_threshold(&list, 0.7, 0.5, 8.0);
    let high = local_threshold(&list, 0.95, 0.5, 8.0);
    assert!(low >= high);
    let kept = |t: f64| list.confidences.iter().filter(|&&v| v > t).count();
    assert!(kept(low) <= kept(high));
}

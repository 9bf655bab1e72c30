mod common;

use common::{rank1_oracle, tpr_oracle};
use proptest::prelude::*;
use uchfr_core::eval::{cmc, embd_score, fuse, rank1, roc, tpr_at_far};

/// Scores quantized to a coarse grid so ties are common.
fn verification() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..3000, 0.02f64..0.5, 2u32..400).prop_flat_map(|(n, gen_rate, levels)| {
        (
            prop::collection::vec((0..levels).prop_map(f64::from), n),
            prop::collection::vec(prop::bool::weighted(gen_rate), n),
        )
            .prop_filter("needs both labels", |(_, g)| g.iter().any(|&x| x) && g.iter().any(|&x| !x))
    })
}

fn identification() -> impl Strategy<Value = (Vec<f64>, Vec<u32>, Vec<u32>)> {
    (1usize..40, 1usize..60, 1u32..12, 2u32..30).prop_flat_map(|(np, ng, classes, levels)| {
        (
            prop::collection::vec((0..levels).prop_map(f64::from), np * ng),
            prop::collection::vec(0..classes, np),
            prop::collection::vec(0..classes, ng),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tpr_matches_exhaustive_threshold_search((scores, genuine) in verification()) {
        let points = roc(&scores, &genuine).unwrap();
        for target in [0.1, 0.01, 0.001] {
            prop_assert_eq!(tpr_at_far(&points, target), tpr_oracle(&scores, &genuine, target));
        }
    }

    #[test]
    fn roc_is_monotone_with_fixed_endpoints((scores, genuine) in verification()) {
        let points = roc(&scores, &genuine).unwrap();
        let (first, last) = (points[0], points[points.len() - 1]);
        prop_assert_eq!((first.far, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.far, last.tpr), (1.0, 1.0));
        for w in points.windows(2) {
            prop_assert!(w[1].far >= w[0].far && w[1].tpr >= w[0].tpr);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
    }

    #[test]
    fn rank1_matches_exhaustive_scan((scores, probes, gallery) in identification()) {
        prop_assert_eq!(rank1(&scores, &probes, &gallery).unwrap(), rank1_oracle(&scores, &probes, &gallery));
        let c = cmc(&scores, &probes, &gallery, gallery.len()).unwrap();
        prop_assert_eq!(c[0], rank1_oracle(&scores, &probes, &gallery));
        prop_assert!(c.windows(2).all(|w| w[1] >= w[0]));
        let reachable = probes.iter().filter(|p| gallery.contains(p)).count() as f64 / probes.len() as f64;
        prop_assert_eq!(*c.last().unwrap(), reachable);
    }

    #[test]
    fn rank1_survives_monotone_maps((scores, probes, gallery) in identification()) {
        let base = rank1(&scores, &probes, &gallery).unwrap();
        for f in [|x: f64| 3.0 * x + 7.0, |x: f64| x * x * x, |x: f64| (x + 1.0).ln()] {
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(rank1(&mapped, &probes, &gallery).unwrap(), base);
        }
    }

    #[test]
    fn rank1_ignores_probe_order((scores, probes, gallery) in identification(), rot in 0usize..40) {
        let ng = gallery.len();
        let k = rot % probes.len();
        let mut p2 = probes.clone();
        p2.rotate_left(k);
        let mut s2 = scores.clone();
        s2.rotate_left(k * ng);
        prop_assert_eq!(rank1(&s2, &p2, &gallery).unwrap(), rank1(&scores, &probes, &gallery).unwrap());
    }

    #[test]
    fn tpr_is_monotone_in_target((scores, genuine) in verification()) {
        let points = roc(&scores, &genuine).unwrap();
        let mut prev = None;
        for target in [0.001, 0.01, 0.05, 0.2, 1.0] {
            let t = tpr_at_far(&points, target);
            if let (Some(a), Some(b)) = (prev, t) {
                prop_assert!(b >= a);
            }
            if t.is_some() {
                prev = t;
            }
        }
    }

    #[test]
    fn score_maps_stay_in_unit_interval(c in -1.0f64..=1.0, p in 0.0f64..=1.0) {
        let e = embd_score(c);
        prop_assert!((0.0..=1.0).contains(&e));
        let f = fuse(e, p);
        prop_assert!(f >= e.min(p) && f <= e.max(p));
    }
}

#[test]
fn tpr_is_undefined_without_enough_imposters() {
    let scores: Vec<f64> = (0..500).map(f64::from).collect();
    let genuine: Vec<bool> = (0..500).map(|i| i % 5 == 0).collect();
    let points = roc(&scores, &genuine).unwrap();
    assert_eq!(tpr_at_far(&points, 0.001), None);
    assert!(tpr_at_far(&points, 0.01).is_some());
}

#[test]
fn degenerate_inputs_are_errors() {
    assert!(roc(&[0.5, 0.6], &[true, true]).is_err());
    assert!(roc(&[0.5, f64::NAN], &[true, false]).is_err());
    assert!(roc(&[0.5], &[true, false]).is_err());
    assert!(rank1(&[0.1, 0.2, 0.3], &[1, 2], &[1, 2]).is_err());
}

#[test]
fn hand_worked_roc() {
    let scores = [0.9, 0.8, 0.8, 0.3];
    let genuine = [true, false, true, false];
    let pts = roc(&scores, &genuine).unwrap();
    let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p.far, p.tpr)).collect();
    assert_eq!(pairs, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    assert_eq!(tpr_at_far(&pts, 0.5), Some(1.0));
    assert_eq!(tpr_at_far(&pts, 0.49), None);
}

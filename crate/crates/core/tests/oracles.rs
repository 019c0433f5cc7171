mod common;

use ackt_core::cluster::{self, KMeansConfig};
use ackt_core::metrics;
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences() {
    for (name, check) in common::op_cases() {
        for seed in 0..3 {
            let err = check(seed).unwrap();
            assert!(err < common::GRAD_TOL, "{name} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn stage_two_objective_matches_finite_differences() {
    for seed in 0..2 {
        let err = common::end_to_end_check(seed).unwrap();
        assert!(err < common::GRAD_TOL, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn pretraining_objective_matches_finite_differences() {
    let err = common::backbone_check(0).unwrap();
    assert!(err < common::GRAD_TOL, "rel err {err:e}");
}

#[test]
fn generator_step_pulls_same_category_together() {
    for seed in 0..3 {
        let s = common::cohesion_step(seed, 200.0, 1e-5).unwrap();
        assert!(s.same_after < s.same_before, "{s:?}");
        assert!(s.diff_after > s.diff_before, "{s:?}");
    }
}

#[test]
fn zero_lambda_step_leaves_states() {
    let s = common::cohesion_step(0, 0.0, 1e-5).unwrap();
    assert_eq!(s.same_after, s.same_before);
    assert_eq!(s.diff_after, s.diff_before);
}

#[test]
fn planted_blobs_are_recovered() {
    for k in [2, 3, 5] {
        let (points, _) = common::planted_blobs(k, 30, 0.05, k as u64);
        let ids: Vec<usize> = (0..points.len()).collect();
        let model = cluster::select_k(&ids, &points, 8, &KMeansConfig::default()).unwrap();
        assert_eq!(model.k, k);
        assert_eq!(model.silhouette_by_k.len(), 7);
    }
}

fn labelled_points() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (3usize..40, 1usize..4).prop_flat_map(|(n, dim)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), n),
            prop::collection::vec(0usize..4, n),
        )
            .prop_filter("two clusters", |(_, l)| l.iter().any(|&x| x != l[0]))
    })
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..6).prop_map(|x| x as f64 / 5.0), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    })
}

proptest! {
    #[test]
    fn silhouette_matches_definition((points, labels) in labelled_points()) {
        let fast = cluster::silhouette(&points, &labels).unwrap();
        prop_assert!((fast - common::brute_silhouette(&points, &labels)).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&fast));
    }

    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored_labels()) {
        let fast = metrics::auc(&scores, &labels).unwrap();
        prop_assert!((fast - common::brute_auc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in scored_labels()) {
        let squashed: Vec<f64> = scores.iter().map(|&s| (3.0 * s - 1.0).tanh()).collect();
        prop_assert_eq!(metrics::auc(&scores, &labels).unwrap(), metrics::auc(&squashed, &labels).unwrap());
    }
}

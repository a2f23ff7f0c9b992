mod common;

use proptest::prelude::*;
use ruinscope::metrics::{auc_ovr, confusion, f1_scores, MetricsReport};

const K: usize = 3;

fn labels_and_preds() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec((0..K, 0..K), 1..200).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(common::config(256))]

    #[test]
    fn accuracy_is_trace_over_total((labels, preds) in labels_and_preds()) {
        let conf = confusion(&labels, &preds, K).unwrap();
        let s = f1_scores(&conf).unwrap();
        let hits = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
        prop_assert_eq!(s.accuracy, hits as f64 / labels.len() as f64);
        prop_assert_eq!(conf.iter().flatten().sum::<u64>(), labels.len() as u64);
    }

    #[test]
    fn weighted_f1_lies_between_supported_class_scores((labels, preds) in labels_and_preds()) {
        let s = f1_scores(&confusion(&labels, &preds, K).unwrap()).unwrap();
        let supported: Vec<f64> = s.per_class.iter().filter(|c| c.support > 0).map(|c| c.f1).collect();
        let lo = supported.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = supported.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.weighted_f1 >= lo - 1e-12 && s.weighted_f1 <= hi + 1e-12);
        prop_assert!((0.0..=1.0).contains(&s.macro_f1));
    }

    #[test]
    fn perfect_predictions_score_one(labels in prop::collection::vec(0..K, 1..100)) {
        let s = f1_scores(&confusion(&labels, &labels, K).unwrap()).unwrap();
        prop_assert_eq!((s.accuracy, s.macro_f1, s.weighted_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn auc_ignores_monotone_rescaling(
        labels in prop::collection::vec(0..K, 2..150),
        raw in prop::collection::vec(0u32..20, 450),
    ) {
        let scores: Vec<f64> = raw[..labels.len() * K].iter().map(|&v| v as f64).collect();
        let warped: Vec<f64> = scores.iter().map(|v| v * v * v + 7.0).collect();
        prop_assert_eq!(auc_ovr(&labels, &scores, K).ok(), auc_ovr(&labels, &warped, K).ok());
    }

    #[test]
    fn auc_of_reversed_scores_is_complement(
        labels in prop::collection::vec(0..2usize, 2..150),
        raw in prop::collection::vec(0u32..50, 150),
    ) {
        // Two classes: scores for class 1 and their negation for class 0.
        let scores: Vec<f64> = labels.iter().zip(&raw).flat_map(|(_, &v)| [-(v as f64), v as f64]).collect();
        let flipped: Vec<f64> = scores.iter().map(|v| -v).collect();
        if let (Ok(a), Ok(b)) = (auc_ovr(&labels, &scores, 2), auc_ovr(&labels, &flipped, 2)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn report_scores_stay_in_unit_interval(
        labels in prop::collection::vec(0..K, 1..100),
        raw in prop::collection::vec(0.0f64..1.0, 300),
    ) {
        let r = MetricsReport::from_scores(&labels, &raw[..labels.len() * K], K).unwrap();
        for v in r.row() {
            prop_assert!(v.is_nan() || (0.0..=1.0).contains(&v));
        }
    }
}

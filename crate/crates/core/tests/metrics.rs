use optima_core::distributions::NoiseSource;
use optima_core::metrics::{
    auroc, basic_metrics, bin_index, expected_calibration_error, predictive_entropy, BasicMetric,
    PredictionLog,
};
use proptest::prelude::*;

/// Pairwise enumeration of `P(out > in) + P(out = in) / 2`.
fn auroc_pairs(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += if y > x {
                1.0
            } else if y == x {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (a.len() * b.len()) as f64
}

fn binary_log(conf: &[f64], correct: &[bool]) -> PredictionLog {
    let probs = conf.iter().map(|&c| vec![c, 1.0 - c]).collect();
    let labels = correct.iter().map(|&ok| if ok { 0 } else { 1 }).collect();
    PredictionLog::classification(probs, labels).unwrap()
}

#[test]
fn perfect_confident_predictions_have_zero_ece() {
    let log = binary_log(&[1.0; 5], &[true; 5]);
    assert_eq!(expected_calibration_error(&log).unwrap().0, 0.0);
}

#[test]
fn synthetic_calibrated_generator_has_small_ece() {
    let mut s = NoiseSource::new(12).stream();
    let n = 10_000;
    let mut conf = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for _ in 0..n {
        let c = s.uniform_range(0.5, 1.0);
        conf.push(c);
        correct.push(s.uniform() < c);
    }
    let (ece, table) = expected_calibration_error(&binary_log(&conf, &correct)).unwrap();
    assert!(ece < 0.02, "{ece}");
    assert_eq!(table.total(), n);
}

#[test]
fn entropy_and_basic_metric_fixtures() {
    assert_eq!(predictive_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
    assert!((predictive_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(predictive_entropy(&[1.5, -0.5]).is_err());
    let log = PredictionLog::regression(vec![1.0, 3.0], vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
    assert_eq!(basic_metrics(&log).unwrap(), BasicMetric::Mse(5.0));
    let log = binary_log(&[0.9, 0.8], &[true, true]);
    assert_eq!(basic_metrics(&log).unwrap(), BasicMetric::Accuracy(1.0));
    assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
    assert_eq!(auroc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
    assert!(auroc(&[], &[1.0]).is_err());
    assert!(
        expected_calibration_error(&PredictionLog::classification(vec![], vec![]).unwrap())
            .is_err()
    );
}

proptest! {
    #[test]
    fn ece_is_bounded_and_order_free(
        rows in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0usize..3), 1..60),
        rot in 0usize..60,
    ) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|(a, b, c, _)| {
            let s = a + b + c + 1e-9;
            vec![a / s, b / s, c / s + 1e-9 / s]
        }).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.3).collect();
        let log = PredictionLog::classification(probs.clone(), labels.clone()).unwrap();
        let (ece, table) = expected_calibration_error(&log).unwrap();
        prop_assert!((0.0..=1.0).contains(&ece));
        prop_assert_eq!(table.total(), rows.len());
        let k = rot % rows.len();
        let mut p2 = probs.clone();
        let mut l2 = labels.clone();
        p2.rotate_left(k);
        l2.rotate_left(k);
        p2.reverse();
        l2.reverse();
        let (ece2, _) = expected_calibration_error(&PredictionLog::classification(p2, l2).unwrap()).unwrap();
        prop_assert!((ece - ece2).abs() < 1e-12);
        for p in &probs {
            let h = predictive_entropy(p).unwrap();
            prop_assert!(h >= 0.0 && h <= 3f64.ln() + 1e-12);
        }
    }

    #[test]
    fn auroc_matches_pairs_and_ignores_monotone_maps(
        a in prop::collection::vec(-5i32..5, 1..30),
        b in prop::collection::vec(-5i32..5, 1..30),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let v = auroc(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - auroc_pairs(&a, &b)).abs() < 1e-12);
        let f = |x: &f64| (x / 3.0).exp() * 2.0 - 7.0;
        let w = auroc(&a.iter().map(f).collect::<Vec<_>>(), &b.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert!((v - w).abs() < 1e-12);
    }

    #[test]
    fn bins_are_right_closed_deciles(c in 0.0f64..=1.0) {
        let b = bin_index(c);
        prop_assert!(b < 10);
        if c > 0.0 {
            prop_assert!(c > b as f64 / 10.0 - 1e-12 && c <= (b + 1) as f64 / 10.0 + 1e-12);
        }
    }
}

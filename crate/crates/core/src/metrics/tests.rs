use super::*;

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn binary_set(truth: &[&[f64]], pred: &[&[f64]]) -> PredictionSet {
    PredictionSet::new(t(pred), t(truth)).unwrap().with_binary(t(pred)).unwrap()
}

#[test]
fn f1_single_sample() {
    let p = binary_set(&[&[1.0, 1.0, 0.0]], &[&[1.0, 0.0, 0.0]]);
    let f = f1_scores(&p).unwrap();
    assert!((f.eb_f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn f1_and_hamming_two_samples() {
    let p = binary_set(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 1.0], &[0.0, 1.0]]);
    let f = f1_scores(&p).unwrap();
    assert!((f.mi_f1 - 0.8).abs() < 1e-15);
    assert!((f.ma_f1 - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(hamming_accuracy(&p).unwrap(), 0.75);
}

#[test]
fn f1_perfect_and_empty() {
    let p = binary_set(&[&[1.0, 0.0], &[0.0, 0.0]], &[&[1.0, 0.0], &[0.0, 0.0]]);
    let f = f1_scores(&p).unwrap();
    assert_eq!((f.eb_f1, f.mi_f1, f.ma_f1), (1.0, 1.0, 1.0));
    let p = binary_set(&[&[1.0, 0.0]], &[&[0.0, 1.0]]);
    assert_eq!(hamming_accuracy(&p).unwrap(), 0.0);
    let unthresholded = PredictionSet::new(t(&[&[0.2]]), t(&[&[1.0]])).unwrap();
    assert!(matches!(f1_scores(&unthresholded), Err(Error::Contract(_))));
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.9, 0.8, 0.7, 0.1], &[1.0, 1.0, 0.0, 0.0]), Some(1.0));
    assert_eq!(auc(&[0.8, 0.3, 0.5], &[1.0, 1.0, 0.0]), Some(0.5));
    assert_eq!(auc(&[0.5, 0.5], &[1.0, 0.0]), Some(0.5));
    assert_eq!(auc(&[0.5, 0.7], &[1.0, 1.0]), None);
}

#[test]
fn auc_all_degenerate_is_unavailable() {
    let p = PredictionSet::new(t(&[&[0.3, 0.1], &[0.4, 0.2]]), t(&[&[1.0, 0.0], &[1.0, 0.0]])).unwrap();
    assert!(matches!(auc_per_label(&p), Err(Error::MetricUnavailable(_))));
    let p = PredictionSet::new(t(&[&[0.3, 0.1], &[0.4, 0.2]]), t(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
    let a = auc_per_label(&p).unwrap();
    assert_eq!(a.per_label, vec![Some(0.0), None]);
    assert_eq!(a.skipped(), vec![1]);
}

#[test]
fn threshold_selection() {
    let p = PredictionSet::new(t(&[&[0.35, 0.2]]), t(&[&[1.0, 0.0]])).unwrap();
    assert_eq!(select_threshold(&p, ThresholdMetric::EbF1, &[0.5]).unwrap().0, 0.5);
    assert_eq!(select_threshold(&p, ThresholdMetric::EbF1, &[0.5, 0.3]).unwrap().0, 0.3);
    // 0.4 and 0.6 both keep the positive and drop the negative.
    let p = PredictionSet::new(t(&[&[0.7, 0.1]]), t(&[&[1.0, 0.0]])).unwrap();
    assert_eq!(select_threshold(&p, ThresholdMetric::Hamming, &[0.6, 0.4]).unwrap().0, 0.4);
    let grid = default_grid();
    assert_eq!(grid.len(), 19);
    assert_eq!((grid[0], grid[18]), (0.05, 0.95));
}

#[test]
fn occurrence_trivial_cases() {
    let truth = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let q = occurrence_metrics(&PredictionSet::new(truth.clone(), truth.clone()).unwrap()).unwrap();
    assert_eq!((q.accuracy, q.precision), (0.0, 0.0));
    assert_eq!(q.discrimination, Some(1.0));
    let half = Tensor::full(&[2, 2], 0.5);
    let q = occurrence_metrics(&PredictionSet::new(half, truth).unwrap()).unwrap();
    assert_eq!(q.precision, 0.5);
    assert_eq!(q.accuracy, 0.5);
}

#[test]
fn calibration_twenty_samples() {
    // Probabilities i/20 in shuffled order; truth is 1 where i % 4 == 3.
    let order = [7usize, 2, 19, 0, 11, 5, 14, 3, 8, 16, 1, 12, 18, 6, 10, 4, 17, 9, 15, 13];
    let probs: Vec<f64> = order.iter().map(|&i| i as f64 / 20.0).collect();
    let truth: Vec<f64> = order.iter().map(|&i| if i % 4 == 3 { 1.0 } else { 0.0 }).collect();
    assert!((species_calibration(&probs, &truth) - 0.335).abs() < 1e-15);
}

#[test]
fn richness_with_deterministic_probabilities() {
    let truth = t(&[&[1.0, 0.0, 1.0], &[0.0, 0.0, 1.0], &[1.0, 1.0, 1.0]]);
    let p = PredictionSet::new(truth.clone(), truth).unwrap();
    let q = richness_metrics(&p, &SamplingConfig { seed: 3, draws: 10, pairs: 5 }).unwrap();
    assert_eq!(q.accuracy, 0.0);
    assert_eq!(q.precision, 0.0);
    assert_eq!(q.discrimination, Some(1.0));
    assert_eq!(q.calibration, 0.5);
    assert!(richness_metrics(&p, &SamplingConfig { seed: 3, draws: 1, pairs: 5 }).is_err());
}

#[test]
fn identical_sites_have_zero_dissimilarity() {
    let truth = t(&[&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]]);
    let p = PredictionSet::new(truth.clone(), truth).unwrap();
    let c = community_metrics(&p, &SamplingConfig { seed: 1, draws: 4, pairs: 6 }).unwrap();
    for q in [c.sor, c.sim, c.nes] {
        assert_eq!(q.accuracy, 0.0);
        assert_eq!(q.discrimination, None);
    }
    assert_eq!(c.empty_pairs, 0);
}

#[test]
fn sampling_is_reproducible() {
    let probs = t(&[&[0.2, 0.9, 0.5], &[0.6, 0.1, 0.4], &[0.3, 0.3, 0.8]]);
    let truth = t(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
    let p = PredictionSet::new(probs, truth).unwrap();
    let cfg = SamplingConfig { seed: 11, draws: 20, pairs: 30 };
    assert_eq!(eco_report(&p, &cfg).unwrap(), eco_report(&p, &cfg).unwrap());
}

#[test]
fn report_formats() {
    let mut r = MetricReport::default();
    r.push("ebF1", Some(0.5));
    r.push("richness_discrimination", None);
    assert_eq!(r.to_csv(), "metric,value\nebF1,0.5\nrichness_discrimination,NA\n");
    assert!(r.to_table().contains("0.5000"));
    assert_eq!(r.get("ebF1"), Some(0.5));
}

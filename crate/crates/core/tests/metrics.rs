use isfl::metrics::{
    self, average_precision, brier, curve_points, ece, log_loss, roc_auc, threshold_metrics,
    EceConfig, PredictionRecord, LOG_LOSS_EPS,
};
mod common;

use common::oracles::{ap_by_thresholds, auc_by_pairs, ece_by_scan};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

/// Scores with plenty of ties and exact bin edges mixed in.
fn score() -> impl Strategy<Value = f64> {
    prop_oneof![
        4 => 0.0f64..=1.0,
        1 => (0u32..=20).prop_map(|k| k as f64 / 20.0),
        1 => (0u32..=17).prop_map(|k| k as f64 / 17.0),
        1 => Just(0.5),
    ]
}

fn records(max: usize) -> impl Strategy<Value = Vec<PredictionRecord>> {
    prop::collection::vec((score(), 0u8..=1), 1..=max).prop_map(|v| {
        v.into_iter()
            .map(|(p, y)| PredictionRecord::new(p, y))
            .collect()
    })
}

fn both_classes(max: usize) -> impl Strategy<Value = Vec<PredictionRecord>> {
    records(max).prop_filter("needs both classes", |r| {
        r.iter().any(|x| x.y == 1) && r.iter().any(|x| x.y == 0)
    })
}

fn flip(records: &[PredictionRecord]) -> Vec<PredictionRecord> {
    records
        .iter()
        .map(|r| PredictionRecord::new(1.0 - r.p, 1 - r.y))
        .collect()
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), TestCaseError> {
    prop_assert!((a - b).abs() <= tol, "{}: {} vs {}", what, a, b);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ece_equals_the_scan_oracle_exactly(recs in records(500), n_bins in prop::sample::select(vec![1usize, 5, 10, 17])) {
        let (value, bins) = ece(&recs, &EceConfig { n_bins }).unwrap();
        prop_assert_eq!(value.to_bits(), ece_by_scan(&recs, n_bins).to_bits());
        prop_assert_eq!(bins.len(), n_bins);
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), recs.len() as u64);
        prop_assert!((0.0..=1.0).contains(&value));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn auc_equals_pair_counting(recs in both_classes(50)) {
        close(roc_auc(&recs).unwrap(), auc_by_pairs(&recs), 1e-12, "auc")?;
    }

    #[test]
    fn average_precision_equals_threshold_scan(recs in both_classes(50)) {
        close(average_precision(&recs).unwrap(), ap_by_thresholds(&recs), 1e-12, "ap")?;
    }

    #[test]
    fn relabeling_classes_changes_nothing(
        recs in records(200).prop_filter("0.5 sits on the decision threshold", |r| r.iter().all(|x| x.p != 0.5))
    ) {
        let flipped = flip(&recs);
        let (a, b) = (threshold_metrics(&recs).unwrap(), threshold_metrics(&flipped).unwrap());
        close(a.accuracy, b.accuracy, 1e-12, "accuracy")?;
        close(a.macro_f1, b.macro_f1, 1e-12, "macro f1")?;
        close(a.mcc.abs(), b.mcc.abs(), 1e-12, "mcc")?;
        close(brier(&recs).unwrap(), brier(&flipped).unwrap(), 1e-12, "brier")?;
        close(log_loss(&recs, LOG_LOSS_EPS).unwrap(), log_loss(&flipped, LOG_LOSS_EPS).unwrap(), 1e-12, "log loss")?;
        let cfg = EceConfig::default();
        close(ece(&recs, &cfg).unwrap().0, ece(&flipped, &cfg).unwrap().0, 1e-12, "ece")?;
    }

    #[test]
    fn every_metric_stays_in_range(recs in records(200)) {
        let r = metrics::report(&recs, &EceConfig::default()).unwrap();
        for (name, v) in [
            ("accuracy", r.accuracy),
            ("macro_f1", r.macro_f1),
            ("brier", r.brier),
            ("ece", r.ece),
            ("roc_auc", r.roc_auc),
            ("average_precision", r.average_precision),
        ] {
            prop_assert!((0.0..=1.0).contains(&v), "{} = {}", name, v);
        }
        prop_assert!((-1.0..=1.0).contains(&r.mcc));
        prop_assert!(r.log_loss >= 0.0 && r.log_loss.is_finite());
        let c = r.confusion;
        prop_assert_eq!(c.tp + c.tn + c.fp + c.fn_, recs.len() as u64);
    }

    #[test]
    fn curves_are_monotone_and_end_at_one(recs in both_classes(100)) {
        let (roc, pr) = curve_points(&recs).unwrap();
        prop_assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        let last = roc.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr && w[1].threshold < w[0].threshold);
        }
        prop_assert_eq!(pr.last().unwrap().recall, 1.0);
        for p in &pr {
            prop_assert!((0.0..=1.0).contains(&p.precision));
        }
    }

    #[test]
    fn scores_outside_the_unit_interval_are_rejected(bad in prop_oneof![-10.0f64..-1e-9, 1.0 + 1e-9..10.0]) {
        let recs = vec![PredictionRecord::new(0.3, 0), PredictionRecord::new(bad, 1)];
        prop_assert!(metrics::report(&recs, &EceConfig::default()).is_err());
    }
}

#[test]
fn perfectly_calibrated_bins_give_zero_ece() {
    // 10 records at confidence 0.7 with exactly 7 correct.
    let mut recs: Vec<PredictionRecord> = (0..7).map(|_| PredictionRecord::new(0.7, 1)).collect();
    recs.extend((0..3).map(|_| PredictionRecord::new(0.7, 0)));
    assert!(ece(&recs, &EceConfig::default()).unwrap().0.abs() < 1e-15);
}

#[test]
fn empty_input_is_an_error() {
    assert!(ece(&[], &EceConfig::default()).is_err());
    assert!(metrics::report(&[], &EceConfig::default()).is_err());
    assert!(ece(&[PredictionRecord::new(0.5, 1)], &EceConfig { n_bins: 0 }).is_err());
}

#[test]
fn single_class_report_warns_instead_of_failing() {
    let recs = vec![PredictionRecord::new(0.9, 1), PredictionRecord::new(0.2, 1)];
    assert!(roc_auc(&recs).is_err());
    let r = metrics::report(&recs, &EceConfig::default()).unwrap();
    assert_eq!((r.roc_auc, r.average_precision), (0.0, 0.0));
    assert!(!r.warnings.is_empty());
}

#[test]
fn export_writes_all_report_files() {
    let recs = vec![
        PredictionRecord::new(0.9, 1),
        PredictionRecord::new(0.6, 0),
        PredictionRecord::new(0.3, 1),
        PredictionRecord::new(0.1, 0),
    ];
    let r = metrics::report(&recs, &EceConfig { n_bins: 4 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.export(dir.path()).unwrap();
    let read = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap();

    let json: serde_json::Value = serde_json::from_str(&read("report.json")).unwrap();
    assert_eq!(json["accuracy"], 0.5);
    assert_eq!(json["n"], 4);

    let reliability = read("reliability.csv");
    let mut lines = reliability.lines();
    assert_eq!(
        lines.next().unwrap(),
        "bin_lo,bin_hi,count,mean_confidence,accuracy"
    );
    assert_eq!(lines.count(), 4);
    assert!(read("roc.csv").starts_with("threshold,fpr,tpr\n"));
    assert!(read("pr.csv").starts_with("threshold,recall,precision\n"));
    assert_eq!(read("roc.csv").lines().count(), 1 + 5);
}

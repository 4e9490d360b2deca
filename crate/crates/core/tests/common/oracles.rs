//! Brute-force reference implementations of the ranking and calibration metrics.

use isfl::metrics::PredictionRecord;

/// Counts, for every positive/negative pair, whether the positive scores higher (ties count half).
pub fn auc_by_pairs(records: &[PredictionRecord]) -> f64 {
    let pos: Vec<f64> = records.iter().filter(|r| r.y == 1).map(|r| r.p).collect();
    let neg: Vec<f64> = records.iter().filter(|r| r.y == 0).map(|r| r.p).collect();
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Scans every bin over every record, with membership decided by the bin edges.
pub fn ece_by_scan(records: &[PredictionRecord], n_bins: usize) -> f64 {
    let total = records.len() as f64;
    let mut out = 0.0;
    for i in 0..n_bins {
        let lo = i as f64 / n_bins as f64;
        let hi = (i + 1) as f64 / n_bins as f64;
        let mut k = 0u64;
        let mut conf_sum = 0.0;
        let mut correct = 0u64;
        for r in records {
            let c = if r.p > 1.0 - r.p { r.p } else { 1.0 - r.p };
            let inside = (c > lo || (i == 0 && c >= lo)) && c <= hi;
            if inside {
                k += 1;
                conf_sum += c;
                let predicted = if r.p >= 0.5 { 1 } else { 0 };
                correct += u64::from(predicted == r.y);
            }
        }
        if k > 0 {
            let kf = k as f64;
            let (conf, acc) = (conf_sum / kf, correct as f64 / kf);
            out += (kf / total) * (acc - conf).abs();
        }
    }
    out
}

/// Precision and recall recomputed from scratch at each distinct threshold.
pub fn ap_by_thresholds(records: &[PredictionRecord]) -> f64 {
    let mut thresholds: Vec<f64> = records.iter().map(|r| r.p).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = records.iter().filter(|r| r.y == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected: Vec<&PredictionRecord> = records.iter().filter(|r| r.p >= t).collect();
        let tp = selected.iter().filter(|r| r.y == 1).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * (tp / selected.len() as f64);
        prev_recall = recall;
    }
    ap
}

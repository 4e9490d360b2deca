//! Discrimination and calibration metrics for binary probabilistic predictions.
//!
//! Every metric consumes [`PredictionRecord`]s: the predicted probability of
//! class 1 and the true label. Confusion-based metrics use a fixed 0.5
//! threshold (`p >= 0.5` predicts class 1).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;
pub const LOG_LOSS_EPS: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Predicted probability of class 1.
    pub p: f64,
    /// True label, 0 or 1.
    pub y: u8,
}

impl PredictionRecord {
    pub fn new(p: f64, y: u8) -> Self {
        PredictionRecord { p, y }
    }

    pub fn predicted(&self) -> u8 {
        u8::from(self.p >= THRESHOLD)
    }
}

fn validate(records: &[PredictionRecord], op: &'static str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty(op));
    }
    for (i, r) in records.iter().enumerate() {
        if !(r.p.is_finite() && (0.0..=1.0).contains(&r.p)) {
            return Err(Error::invalid(
                format!("records[{i}].p"),
                format!("{} is not a probability", r.p),
            ));
        }
        if r.y > 1 {
            return Err(Error::invalid(
                format!("records[{i}].y"),
                "label must be 0 or 1",
            ));
        }
    }
    Ok(())
}

/// 2×2 confusion counts with class 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_records(records: &[PredictionRecord]) -> Self {
        let mut c = ConfusionCounts::default();
        for r in records {
            match (r.predicted(), r.y) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (1, _) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Accuracy, macro F1 and MCC derived from these counts.
    pub fn scores(&self) -> ThresholdMetrics {
        let (tp, tn, fp, fn_) = (
            self.tp as f64,
            self.tn as f64,
            self.fp as f64,
            self.fn_ as f64,
        );
        let mut degenerate = Vec::new();
        let accuracy = (tp + tn) / (tp + tn + fp + fn_);
        let f1 = |hit: f64, name: &str, degenerate: &mut Vec<String>| {
            let denom = 2.0 * hit + fp + fn_;
            if denom == 0.0 {
                degenerate.push(format!("f1 for class {name} has a zero denominator"));
                0.0
            } else {
                2.0 * hit / denom
            }
        };
        let macro_f1 = 0.5 * (f1(tp, "1", &mut degenerate) + f1(tn, "0", &mut degenerate));
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        let mcc = if denom == 0.0 {
            degenerate.push("mcc has a zero denominator".into());
            0.0
        } else {
            (tp * tn - fp * fn_) / denom.sqrt()
        };
        ThresholdMetrics {
            confusion: *self,
            accuracy,
            macro_f1,
            mcc,
            degenerate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdMetrics {
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mcc: f64,
    /// Metrics whose denominators vanished and were reported as 0.
    pub degenerate: Vec<String>,
}

pub fn threshold_metrics(records: &[PredictionRecord]) -> Result<ThresholdMetrics> {
    validate(records, "threshold_metrics")?;
    Ok(ConfusionCounts::from_records(records).scores())
}

/// Mean squared error between `p` and `y`.
pub fn brier(records: &[PredictionRecord]) -> Result<f64> {
    validate(records, "brier")?;
    Ok(records
        .iter()
        .map(|r| (r.p - r.y as f64).powi(2))
        .sum::<f64>()
        / records.len() as f64)
}

/// Negative mean log-likelihood. The probability of the true class is
/// clipped to `[eps, 1 - eps]`, which keeps the loss symmetric under relabeling.
pub fn log_loss(records: &[PredictionRecord], eps: f64) -> Result<f64> {
    validate(records, "log_loss")?;
    let total: f64 = records
        .iter()
        .map(|r| {
            let q = if r.y == 1 { r.p } else { 1.0 - r.p };
            -q.clamp(eps, 1.0 - eps).ln()
        })
        .sum();
    Ok(total / records.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EceConfig {
    pub n_bins: usize,
}

impl Default for EceConfig {
    fn default() -> Self {
        EceConfig { n_bins: 10 }
    }
}

impl EceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::invalid("ece.n_bins", "must be positive"));
        }
        Ok(())
    }

    /// Lower edge of bin `i`; bin `i` covers `(edge(i), edge(i+1)]`, and bin 0 also includes 0.
    pub fn edge(&self, i: usize) -> f64 {
        i as f64 / self.n_bins as f64
    }

    /// Bin holding confidence `c`.
    pub fn bin_of(&self, c: f64) -> usize {
        let n = self.n_bins;
        let mut i = ((c * n as f64).ceil() as usize)
            .saturating_sub(1)
            .min(n - 1);
        // Correct for rounding in `c * n` so that membership agrees with the edges.
        while i > 0 && c <= self.edge(i) {
            i -= 1;
        }
        while i + 1 < n && c > self.edge(i + 1) {
            i += 1;
        }
        i
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    /// Mean confidence in the bin, 0 when empty.
    pub mean_confidence: f64,
    /// Fraction of correct predictions in the bin, 0 when empty.
    pub accuracy: f64,
}

/// Expected calibration error over equal-width confidence bins.
///
/// Confidence is `max(p, 1 - p)` and correctness compares the thresholded
/// prediction with the label. Returns the ECE and the per-bin statistics.
pub fn ece(records: &[PredictionRecord], config: &EceConfig) -> Result<(f64, Vec<ReliabilityBin>)> {
    validate(records, "ece")?;
    config.validate()?;
    let n = config.n_bins;
    let mut counts = vec![0u64; n];
    let mut conf_sums = vec![0.0; n];
    let mut correct = vec![0u64; n];
    for r in records {
        let c = r.p.max(1.0 - r.p);
        let b = config.bin_of(c);
        counts[b] += 1;
        conf_sums[b] += c;
        correct[b] += u64::from(r.predicted() == r.y);
    }
    let total = records.len() as f64;
    let mut ece = 0.0;
    let mut bins = Vec::with_capacity(n);
    for i in 0..n {
        let (mean_confidence, accuracy) = if counts[i] == 0 {
            (0.0, 0.0)
        } else {
            let k = counts[i] as f64;
            let (conf, acc) = (conf_sums[i] / k, correct[i] as f64 / k);
            ece += (k / total) * (acc - conf).abs();
            (conf, acc)
        };
        bins.push(ReliabilityBin {
            lo: config.edge(i),
            hi: config.edge(i + 1),
            count: counts[i],
            mean_confidence,
            accuracy,
        });
    }
    Ok((ece, bins))
}

fn require_both_classes(records: &[PredictionRecord], op: &'static str) -> Result<(usize, usize)> {
    validate(records, op)?;
    let pos = records.iter().filter(|r| r.y == 1).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass { op });
    }
    Ok((pos, neg))
}

/// Records sorted by descending score, grouped into runs of equal score.
fn descending_groups(records: &[PredictionRecord]) -> Vec<(f64, u64, u64)> {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.p.total_cmp(&a.p));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for r in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == r.p => {
                if r.y == 1 {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((r.p, u64::from(r.y == 1), u64::from(r.y == 0))),
        }
    }
    groups
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with midranks for ties.
pub fn roc_auc(records: &[PredictionRecord]) -> Result<f64> {
    let (pos, neg) = require_both_classes(records, "roc_auc")?;
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.p.total_cmp(&b.p));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].p == sorted[i].p {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += mid * sorted[i..j].iter().filter(|r| r.y == 1).count() as f64;
        i = j;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over descending distinct thresholds.
pub fn average_precision(records: &[PredictionRecord]) -> Result<f64> {
    let (pos, _) = require_both_classes(records, "average_precision")?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (_, gp, gn) in descending_groups(records) {
        tp += gp;
        fp += gn;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// ROC and precision-recall points, one per distinct score, ordered by
/// decreasing threshold. The ROC list starts at `(0, 0)` with threshold +inf.
pub fn curve_points(records: &[PredictionRecord]) -> Result<(Vec<RocPoint>, Vec<PrPoint>)> {
    let (pos, neg) = require_both_classes(records, "curve_points")?;
    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (score, gp, gn) in descending_groups(records) {
        tp += gp;
        fp += gn;
        roc.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
        pr.push(PrPoint {
            threshold: score,
            recall: tp as f64 / pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok((roc, pr))
}

/// Every metric in one place, computed at threshold 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mcc: f64,
    pub brier: f64,
    pub log_loss: f64,
    pub ece: f64,
    pub roc_auc: f64,
    pub average_precision: f64,
    pub confusion: ConfusionCounts,
    pub ece_bins: usize,
    pub reliability: Vec<ReliabilityBin>,
    /// Names of metrics whose denominators vanished (reported as 0).
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub roc_curve: Vec<RocPoint>,
    #[serde(skip)]
    pub pr_curve: Vec<PrPoint>,
}

/// Computes the full report. Curve metrics are 0 with a warning when only
/// one class is present.
pub fn report(records: &[PredictionRecord], ece_config: &EceConfig) -> Result<MetricsReport> {
    validate(records, "report")?;
    let t = threshold_metrics(records)?;
    let (ece, reliability) = ece(records, ece_config)?;
    let mut warnings = t.degenerate.clone();
    let (roc_auc, average_precision, roc_curve, pr_curve) = match curve_points(records) {
        Ok((roc, pr)) => (roc_auc(records)?, average_precision(records)?, roc, pr),
        Err(Error::SingleClass { .. }) => {
            warnings.push("roc_auc and average_precision need both classes".into());
            (0.0, 0.0, Vec::new(), Vec::new())
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        n: records.len(),
        accuracy: t.accuracy,
        macro_f1: t.macro_f1,
        mcc: t.mcc,
        brier: brier(records)?,
        log_loss: log_loss(records, LOG_LOSS_EPS)?,
        ece,
        roc_auc,
        average_precision,
        confusion: t.confusion,
        ece_bins: ece_config.n_bins,
        reliability,
        warnings,
        roc_curve,
        pr_curve,
    })
}

impl MetricsReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// `bin_lo,bin_hi,count,mean_confidence,accuracy`
    pub fn write_reliability_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_lo,bin_hi,count,mean_confidence,accuracy")?;
        for b in &self.reliability {
            writeln!(
                w,
                "{},{},{},{},{}",
                b.lo, b.hi, b.count, b.mean_confidence, b.accuracy
            )?;
        }
        Ok(())
    }

    /// `threshold,fpr,tpr`
    pub fn write_roc_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "threshold,fpr,tpr")?;
        for p in &self.roc_curve {
            writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }

    /// `threshold,recall,precision`
    pub fn write_pr_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "threshold,recall,precision")?;
        for p in &self.pr_curve {
            writeln!(w, "{},{},{}", p.threshold, p.recall, p.precision)?;
        }
        Ok(())
    }

    /// Writes `report.json`, `reliability.csv`, `roc.csv` and `pr.csv` into `dir`.
    pub fn export(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        self.write_json(&mut buf)?;
        buf.push(b'\n');
        std::fs::write(dir.join("report.json"), &buf)?;
        let mut buf = Vec::new();
        self.write_reliability_csv(&mut buf)?;
        std::fs::write(dir.join("reliability.csv"), &buf)?;
        let mut buf = Vec::new();
        self.write_roc_csv(&mut buf)?;
        std::fs::write(dir.join("roc.csv"), &buf)?;
        let mut buf = Vec::new();
        self.write_pr_csv(&mut buf)?;
        std::fs::write(dir.join("pr.csv"), &buf)?;
        Ok(())
    }
}

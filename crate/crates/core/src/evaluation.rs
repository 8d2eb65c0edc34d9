//! ROC-AUC, threshold metrics and fold aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::Argument(format!("label {l} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Probability that a random positive (label 1) outscores a random
/// negative, ties counted one half. Computed from midranks in
/// `O(n log n)`; all arithmetic before the final division is on integers
/// (doubled ranks), so the result equals exhaustive pair counting exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_labels(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC-AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum over positives of 2 * midrank (1-based)
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let doubled_midrank = (i + 1 + j) as u128;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_sum += doubled_midrank * tied_pos;
        i = j;
    }
    let u2 = rank2_sum - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Threshold metrics; `None` marks an undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub counts: ConfusionCounts,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ThresholdMetrics {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self> {
        let total = counts.total();
        if total == 0 {
            return Err(Error::Argument("no predictions to score".into()));
        }
        let ConfusionCounts { tp, fp, tn, fn_ } = counts;
        Ok(Self {
            accuracy: (tp + tn) as f64 / total as f64,
            precision: ratio(tp, tp + fp),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            counts,
        })
    }
}

/// Predicts 1 iff `p1 > threshold`; label 1 is the positive class.
pub fn confusion_metrics(p1: &[f64], labels: &[u8], threshold: f64) -> Result<ThresholdMetrics> {
    if p1.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} probabilities for {} labels",
            p1.len(),
            labels.len()
        )));
    }
    check_labels(labels)?;
    let mut c = ConfusionCounts::default();
    for (&p, &l) in p1.iter().zip(labels) {
        match (p > threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    ThresholdMetrics::from_counts(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub size: usize,
    pub roc_auc: Option<f64>,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub counts: ConfusionCounts,
}

impl FoldMetrics {
    /// Scores one held-out fold at threshold 0.5.
    pub fn evaluate(fold: usize, p1: &[f64], labels: &[u8]) -> Result<Self> {
        let m = confusion_metrics(p1, labels, 0.5)?;
        let roc_auc = match roc_auc(p1, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            fold,
            size: labels.len(),
            roc_auc,
            accuracy: m.accuracy,
            precision: m.precision,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            counts: m.counts,
        })
    }

    /// Metric values in table order.
    pub fn values(&self) -> [Option<f64>; 5] {
        [
            self.roc_auc,
            Some(self.accuracy),
            self.precision,
            self.sensitivity,
            self.specificity,
        ]
    }
}

pub const METRIC_NAMES: [&str; 5] = ["ROC-AUC", "Accuracy", "Precision", "Sensitivity", "Specificity"];

/// Mean and sample standard deviation over the folds where a metric is
/// defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    /// Sample (n − 1) standard deviation; `None` with fewer than two values.
    pub std: Option<f64>,
    pub defined_folds: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
        let std = mean.filter(|_| n >= 2).map(|m| {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Self {
            mean,
            std,
            defined_folds: n,
        }
    }

    /// `"mean ± std"` to four decimals.
    pub fn display(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            (Some(m), None) => format!("{m:.4} ± n/a"),
            (None, _) => "undefined".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub folds: Vec<FoldMetrics>,
    pub roc_auc: Summary,
    pub accuracy: Summary,
    pub precision: Summary,
    pub sensitivity: Summary,
    pub specificity: Summary,
    pub dispersion: String,
}

impl EvalReport {
    pub fn summaries(&self) -> [Summary; 5] {
        [self.roc_auc, self.accuracy, self.precision, self.sensitivity, self.specificity]
    }

    /// Plain-text table with one row per fold plus the `mean ± std` row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "Fold");
        for name in METRIC_NAMES {
            let _ = write!(s, " {name:>17}");
        }
        s.push('\n');
        let cell = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        for f in &self.folds {
            let _ = write!(s, "{:<10}", f.fold + 1);
            for v in f.values() {
                let _ = write!(s, " {:>17}", cell(v));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<10}", "mean ± std");
        for sm in self.summaries() {
            let _ = write!(s, " {:>17}", sm.display());
        }
        s.push('\n');
        let _ = writeln!(s, "({}: {})", self.model, self.dispersion);
        s
    }
}

/// Per-metric mean and sample standard deviation across folds.
pub fn aggregate_report(model: &str, folds: Vec<FoldMetrics>) -> Result<EvalReport> {
    if folds.is_empty() {
        return Err(Error::Argument("no folds to aggregate".into()));
    }
    let column = |i: usize| -> Summary {
        let vals: Vec<f64> = folds.iter().filter_map(|f| f.values()[i]).collect();
        Summary::of(&vals)
    };
    Ok(EvalReport {
        model: model.to_string(),
        roc_auc: column(0),
        accuracy: column(1),
        precision: column(2),
        sensitivity: column(3),
        specificity: column(4),
        dispersion: "sample standard deviation across folds".into(),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(roc_auc(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&s, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.6, 0.4, 0.6, 0.2], &[1, 0, 0, 1]).unwrap(), 0.375);
        assert!(matches!(roc_auc(&s, &[1, 1, 1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn confusion_arithmetic() {
        let c = ConfusionCounts { tp: 3, fp: 1, tn: 5, fn_: 1 };
        let m = ThresholdMetrics::from_counts(c).unwrap();
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.sensitivity, Some(0.75));
        assert_eq!(m.specificity, Some(5.0 / 6.0));
    }

    #[test]
    fn threshold_ties_predict_negative() {
        let m = confusion_metrics(&[0.5, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 0, fp: 0, tn: 1, fn_: 1 });
        assert_eq!(m.precision, None);
        assert_eq!(m.specificity, Some(1.0));
        assert!(confusion_metrics(&[], &[], 0.5).is_err());
    }

    #[test]
    fn two_point_std() {
        let s = Summary::of(&[0.7, 0.8]);
        assert!((s.mean.unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(s.display(), "0.7500 ± 0.0707");
        assert_eq!(Summary::of(&[0.5, 0.5, 0.5]).std, Some(0.0));
        assert_eq!(Summary::of(&[0.5]).display(), "0.5000 ± n/a");
    }
}

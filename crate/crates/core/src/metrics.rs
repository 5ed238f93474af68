//! Evaluation metrics: rank-based AUC and one-vs-rest confusion statistics.
//!
//! Multi-class sensitivity, specificity and F1 are macro averages over
//! one-vs-rest problems built from argmax predictions. Accuracy is the micro
//! mean of one-vs-rest correctness over all `N x K` decisions. AUC ties count
//! as half a win.

use serde::{Deserialize, Serialize};

use crate::data::Labels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mann–Whitney AUC: `(wins + 0.5 ties) / (positives · negatives)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("roc_auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("roc_auc"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the positive rank sum, so tied mid-ranks stay integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_mid * tied_pos;
        i = j + 1;
    }
    let p = pos as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> Option<f64> {
        if self.tp + self.fn_ == 0 {
            return None;
        }
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One-vs-rest counts for each class from hard predictions.
pub fn confusion_counts(pred: &[usize], labels: &[usize], classes: usize) -> Result<Vec<ConfusionCounts>> {
    if pred.len() != labels.len() {
        return Err(Error::dim("confusion_counts", &[pred.len()], &[labels.len()]));
    }
    let mut out = vec![ConfusionCounts::default(); classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Contract(format!("class index out of range for K={classes}")));
        }
        for (k, c) in out.iter_mut().enumerate() {
            match (p == k, y == k) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub f1: f64,
    /// `None` where the class has no positives or no negatives.
    pub per_class_auc: Vec<Option<f64>>,
    #[serde(skip)]
    pub flagged: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("metrics json: {e}")))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn mean_defined(vals: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = vals.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Macro one-vs-rest report from class probabilities.
///
/// Single-label predictions are the argmax; multi-label predictions threshold
/// each class probability at 0.5.
pub fn classification_report(probs: &Tensor, labels: &Labels) -> Result<MetricsReport> {
    if probs.rank() != 2 || probs.rows() != labels.len() {
        return Err(Error::dim("classification_report", probs.shape(), &[labels.len()]));
    }
    let (n, k) = (probs.rows(), probs.shape()[1]);
    let truth = labels.to_matrix(k);
    let mut counts = vec![ConfusionCounts::default(); k];
    match labels {
        Labels::Single(ys) => {
            let pred: Vec<usize> = (0..n).map(|i| argmax(probs.row(i))).collect();
            counts = confusion_counts(&pred, ys, k)?;
        }
        Labels::Multi { hot, .. } => {
            for i in 0..n {
                for (c, cnt) in counts.iter_mut().enumerate() {
                    let p = probs.at2(i, c) >= 0.5;
                    match (p, hot[i * k + c] != 0) {
                        (true, true) => cnt.tp += 1,
                        (true, false) => cnt.fp += 1,
                        (false, true) => cnt.fn_ += 1,
                        (false, false) => cnt.tn += 1,
                    }
                }
            }
        }
    }
    let mut flagged = Vec::new();
    let mut sens = Vec::with_capacity(k);
    let mut spec = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let mut per_class_auc = Vec::with_capacity(k);
    for (c, cnt) in counts.iter().enumerate() {
        if cnt.tp + cnt.fn_ == 0 {
            flagged.push(format!("class {c}: no positives, sensitivity and F1 reported as 0"));
        }
        if cnt.tn + cnt.fp == 0 {
            flagged.push(format!("class {c}: no negatives, specificity reported as 0"));
        }
        sens.push(cnt.sensitivity().unwrap_or(0.0));
        spec.push(cnt.specificity().unwrap_or(0.0));
        f1.push(cnt.f1().unwrap_or(0.0));
        let scores: Vec<f64> = (0..n).map(|i| probs.at2(i, c)).collect();
        let is_pos: Vec<bool> = (0..n).map(|i| truth.at2(i, c) != 0.0).collect();
        match roc_auc(&scores, &is_pos) {
            Ok(a) => per_class_auc.push(Some(a)),
            Err(Error::UndefinedMetric(_)) => {
                flagged.push(format!("class {c}: AUC undefined, excluded from mean"));
                per_class_auc.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let correct: usize = counts.iter().map(|c| c.tp + c.tn).sum();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricsReport {
        auc: mean_defined(&per_class_auc),
        sensitivity: mean(&sens),
        specificity: mean(&spec),
        accuracy: correct as f64 / (n * k) as f64,
        f1: mean(&f1),
        per_class_auc,
        flagged,
    })
}

/// Plain top-1 accuracy for single-label data.
pub fn top1_accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilabelAuc {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub flagged: Vec<usize>,
}

/// Column-wise AUC and its mean over non-degenerate classes.
pub fn multilabel_auc(scores: &Tensor, labels: &Labels) -> Result<MultilabelAuc> {
    if scores.rank() != 2 || scores.rows() != labels.len() {
        return Err(Error::dim("multilabel_auc", scores.shape(), &[labels.len()]));
    }
    let (n, k) = (scores.rows(), scores.shape()[1]);
    let truth = labels.to_matrix(k);
    let mut per_class = Vec::with_capacity(k);
    let mut flagged = Vec::new();
    for c in 0..k {
        let s: Vec<f64> = (0..n).map(|i| scores.at2(i, c)).collect();
        let y: Vec<bool> = (0..n).map(|i| truth.at2(i, c) != 0.0).collect();
        match roc_auc(&s, &y) {
            Ok(a) => per_class.push(Some(a)),
            Err(Error::UndefinedMetric(_)) => {
                flagged.push(c);
                per_class.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MultilabelAuc {
        mean: mean_defined(&per_class),
        per_class,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_is_rank_invariant() {
        let s = [0.2, 0.9, 0.4, 0.4, 0.05, 0.7];
        let y = [false, true, true, false, false, true];
        let t: Vec<f64> = s.iter().map(|v: &f64| (3.0 * v).exp() - 2.0).collect();
        assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&t, &y).unwrap());
    }

    #[test]
    fn confusion_examples() {
        let c = confusion_counts(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert!(c.iter().all(|x| x.fp == 0 && x.fn_ == 0));
        let c = confusion_counts(&[1, 1, 1, 1], &[1, 0, 1, 0], 2).unwrap();
        assert_eq!(c[1], ConfusionCounts { tp: 2, fp: 2, tn: 0, fn_: 0 });
        // K=3, six samples, tallied by hand
        let c = confusion_counts(&[0, 1, 2, 2, 0, 1], &[0, 2, 2, 1, 1, 1], 3).unwrap();
        assert_eq!(c[0], ConfusionCounts { tp: 1, fp: 1, tn: 4, fn_: 0 });
        assert_eq!(c[1], ConfusionCounts { tp: 1, fp: 1, tn: 2, fn_: 2 });
        assert_eq!(c[2], ConfusionCounts { tp: 1, fp: 1, tn: 3, fn_: 1 });
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let probs = Tensor::from_rows(&[&[0.9, 0.05, 0.05], &[0.1, 0.8, 0.1], &[0.0, 0.3, 0.7]]);
        let r = classification_report(&probs, &Labels::Single(vec![0, 1, 2])).unwrap();
        for v in [r.auc, r.sensitivity, r.specificity, r.accuracy, r.f1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn binary_half_right() {
        // TP=1, FP=1, FN=1, TN=1 with class 1 as positive
        let probs = Tensor::from_rows(&[&[0.2, 0.8], &[0.3, 0.7], &[0.6, 0.4], &[0.9, 0.1]]);
        let r = classification_report(&probs, &Labels::Single(vec![1, 0, 1, 0])).unwrap();
        assert_eq!(r.f1, 0.5);
        assert_eq!(r.accuracy, 0.5);
        let macro_auc = r.per_class_auc.iter().flatten().sum::<f64>() / 2.0;
        assert!((r.auc - macro_auc).abs() <= 1e-12);
    }

    #[test]
    fn missing_class_is_flagged() {
        let probs = Tensor::from_rows(&[&[0.9, 0.1, 0.0], &[0.2, 0.8, 0.0]]);
        let r = classification_report(&probs, &Labels::Single(vec![0, 1])).unwrap();
        assert!(r.per_class_auc[2].is_none());
        assert!(!r.flagged.is_empty());
    }

    #[test]
    fn multilabel_examples() {
        let scores = Tensor::from_rows(&[&[0.9, 0.5], &[0.1, 0.5], &[0.8, 0.5], &[0.2, 0.5]]);
        let labels = Labels::Multi { classes: 2, hot: vec![1, 1, 0, 0, 1, 0, 0, 1] };
        let m = multilabel_auc(&scores, &labels).unwrap();
        assert_eq!(m.per_class, vec![Some(1.0), Some(0.5)]);
        assert_eq!(m.mean, 0.75);
        let degenerate = Labels::Multi { classes: 2, hot: vec![1, 1, 0, 1, 1, 1, 0, 1] };
        let m = multilabel_auc(&scores, &degenerate).unwrap();
        assert_eq!(m.flagged, vec![1]);
        assert_eq!(m.mean, 1.0);
    }

    #[test]
    fn json_has_fixed_key_order() {
        let r = MetricsReport {
            auc: 0.5,
            sensitivity: 0.25,
            specificity: 0.75,
            accuracy: 0.5,
            f1: 0.4,
            per_class_auc: vec![Some(0.5), None],
            flagged: vec![],
        };
        let j = serde_json::to_string(&r).unwrap();
        assert_eq!(
            j,
            r#"{"auc":0.5,"sensitivity":0.25,"specificity":0.75,"accuracy":0.5,"f1":0.4,"per_class_auc":[0.5,null]}"#
        );
        assert_eq!(MetricsReport::from_json(&j).unwrap(), r);
    }
}

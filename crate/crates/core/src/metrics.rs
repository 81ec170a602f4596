//! Evaluation metrics: confusion matrix, Cohen's kappa (unweighted, linear,
//! quadratic), ROC AUC and average precision.
//!
//! Definitions are deliberately simple enough to re-derive by brute force;
//! the test suite does exactly that.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("ROC AUC undefined: only one class present")]
    OneClass,
    #[error("average precision undefined: no positive labels")]
    NoPositives,
    #[error("class index {0} out of range for {1} classes")]
    ClassOutOfRange(usize, usize),
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize, class_names: Vec<String>) -> Self {
        assert_eq!(class_names.len(), n_classes);
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
            class_names,
        }
    }

    pub fn from_pairs(
        truths: &[usize],
        preds: &[usize],
        n_classes: usize,
        class_names: Vec<String>,
    ) -> Result<Self, MetricsError> {
        if truths.len() != preds.len() {
            return Err(MetricsError::LengthMismatch(truths.len(), preds.len()));
        }
        let mut cm = ConfusionMatrix::new(n_classes, class_names);
        for (&t, &p) in truths.iter().zip(preds) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<(), MetricsError> {
        if truth >= self.n_classes {
            return Err(MetricsError::ClassOutOfRange(truth, self.n_classes));
        }
        if pred >= self.n_classes {
            return Err(MetricsError::ClassOutOfRange(pred, self.n_classes));
        }
        self.counts[truth * self.n_classes + pred] += 1;
        Ok(())
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, r: usize) -> u64 {
        (0..self.n_classes).map(|c| self.get(r, c)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|r| self.get(r, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.n_classes).map(|i| self.get(i, i)).sum();
        trace as f64 / total as f64
    }

    /// CSV with a header row of predicted class names and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true_class");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for r in 0..self.n_classes {
            out.push_str(&self.class_names[r]);
            for c in 0..self.n_classes {
                out.push(',');
                out.push_str(&self.get(r, c).to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaWeighting {
    None,
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaValue {
    pub value: f64,
    /// Set when chance agreement is 1 (single-class degenerate case); the
    /// value is then defined as 0.
    pub degenerate: bool,
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)`.
///
/// The weighted variants use disagreement weights `w_ij = |i-j| / (n-1)`
/// (linear) or `w_ij = (i-j)^2 / (n-1)^2` (quadratic) and
/// `kappa = 1 - sum(w*O) / sum(w*E)` with `E_ij = row_i * col_j / total`.
pub fn kappa(cm: &ConfusionMatrix, weighting: KappaWeighting) -> Result<KappaValue, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let n = cm.n_classes;
    let t = total as f64;
    let rows: Vec<f64> = (0..n).map(|r| cm.row_sum(r) as f64).collect();
    let cols: Vec<f64> = (0..n).map(|c| cm.col_sum(c) as f64).collect();

    match weighting {
        KappaWeighting::None => {
            let po: f64 = (0..n).map(|i| cm.get(i, i) as f64).sum::<f64>() / t;
            let pe: f64 = (0..n).map(|i| rows[i] * cols[i]).sum::<f64>() / (t * t);
            if (1.0 - pe).abs() < 1e-15 {
                return Ok(KappaValue {
                    value: 0.0,
                    degenerate: true,
                });
            }
            Ok(KappaValue {
                value: (po - pe) / (1.0 - pe),
                degenerate: false,
            })
        }
        KappaWeighting::Linear | KappaWeighting::Quadratic => {
            let weight = |i: usize, j: usize| -> f64 {
                if n == 1 {
                    return 0.0;
                }
                let d = (i as f64 - j as f64).abs() / (n as f64 - 1.0);
                match weighting {
                    KappaWeighting::Linear => d,
                    _ => d * d,
                }
            };
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                for j in 0..n {
                    num += weight(i, j) * cm.get(i, j) as f64;
                    den += weight(i, j) * rows[i] * cols[j] / t;
                }
            }
            if den.abs() < 1e-15 {
                // all mass on one class: expected disagreement is zero
                return Ok(KappaValue {
                    value: 0.0,
                    degenerate: true,
                });
            }
            Ok(KappaValue {
                value: 1.0 - num / den,
                degenerate: false,
            })
        }
    }
}

/// ROC AUC as the Mann-Whitney statistic: `P(score+ > score-) + P(tie)/2`,
/// computed by sorting. Labels are `true` for the positive class.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Walk groups of tied scores in ascending order; negatives seen so far
    // are strictly below the current group.
    let mut wins = 0.0_f64;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos = 0usize;
        let mut group_neg = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        wins += group_pos as f64 * (neg_below as f64 + group_neg as f64 / 2.0);
        neg_below += group_neg;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// One ROC operating point. Thresholds descend; the first point is (0,0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve with tied scores grouped at a single threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal integral of a ROC curve; must agree with [`roc_auc`].
pub fn auc_trapezoid(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Average precision: `sum_k (R_k - R_{k-1}) * P_k` over descending unique
/// score thresholds, ties grouped.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            }
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub kappa_linear: f64,
    pub kappa_quadratic: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub n_evaluated: u64,
    pub class_names: Vec<String>,
}

impl MetricsReport {
    /// Classification metrics from a confusion matrix; AUROC/AP are filled by
    /// the caller when a binary score is available.
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self, MetricsError> {
        let n = cm.n_classes;
        let mut precision = Vec::with_capacity(n);
        let mut recall = Vec::with_capacity(n);
        for c in 0..n {
            let col = cm.col_sum(c);
            let row = cm.row_sum(c);
            precision.push(if col == 0 {
                0.0
            } else {
                cm.get(c, c) as f64 / col as f64
            });
            recall.push(if row == 0 {
                0.0
            } else {
                cm.get(c, c) as f64 / row as f64
            });
        }
        Ok(MetricsReport {
            accuracy: cm.accuracy(),
            kappa: kappa(cm, KappaWeighting::None)?.value,
            kappa_linear: kappa(cm, KappaWeighting::Linear)?.value,
            kappa_quadratic: kappa(cm, KappaWeighting::Quadratic)?.value,
            auroc: None,
            ap: None,
            per_class_precision: precision,
            per_class_recall: recall,
            n_evaluated: cm.total(),
            class_names: cm.class_names.clone(),
        })
    }
}

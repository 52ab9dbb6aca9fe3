//! Confusion matrix and classification metrics.
//!
//! Rows of the confusion matrix are true classes, columns predictions. For
//! class `c`: `TP = m[c][c]`, `FP = column sum - TP`, `FN = row sum - TP`.
//! A ratio with a zero denominator evaluates to `0.0` and is reported as
//! undefined. Macro averages skip classes with zero support; micro averages
//! pool counts across classes, so for single-label data micro precision,
//! micro recall and micro F1 all equal accuracy. (Some reports call the
//! micro row "weighted avg"; here it is labeled `micro avg`.)

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClassLabel, NUM_CLASSES};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("no samples")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    /// Builds from a square table of counts.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let k = counts.len();
        assert!(counts.iter().all(|r| r.len() == k), "confusion matrix must be square");
        ConfusionMatrix { counts }
    }

    /// Confusion over `num_classes` integer labels.
    pub fn from_indices(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<Self, MetricsError> {
        if y_true.len() != y_pred.len() {
            return Err(MetricsError::LengthMismatch {
                truth: y_true.len(),
                pred: y_pred.len(),
            });
        }
        if y_true.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut cm = ConfusionMatrix::new(num_classes);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            for label in [t, p] {
                if label >= num_classes {
                    return Err(MetricsError::LabelOutOfRange {
                        label,
                        classes: num_classes,
                    });
                }
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn fp(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum::<u64>() - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        self.support(c) - self.tp(c)
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.total() - self.tp(c) - self.fp(c) - self.fn_(c)
    }

    /// Number of samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn supports(&self) -> Vec<u64> {
        (0..self.num_classes()).map(|c| self.support(c)).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.tp(c)).sum()
    }

    /// CSV with a header row of predicted class names and one row per true
    /// class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for n in names {
            out += ",";
            out += n;
        }
        out += "\n";
        for (name, row) in names.iter().zip(&self.counts) {
            out += name;
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out += "\n";
        }
        out
    }
}

/// Confusion matrix over the eight lesion classes.
pub fn confusion(y_true: &[ClassLabel], y_pred: &[ClassLabel]) -> Result<ConfusionMatrix, MetricsError> {
    let t: Vec<usize> = y_true.iter().map(|c| c.index()).collect();
    let p: Vec<usize> = y_pred.iter().map(|c| c.index()).collect();
    ConfusionMatrix::from_indices(&t, &p, NUM_CLASSES)
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, false)
    } else {
        (num as f64 / den as f64, true)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p == r {
        // exact, where 2pr/(p+r) can be off by an ulp
        p
    } else if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Correct predictions over all predictions.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace(), cm.total()).0
}

pub fn precision_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.num_classes())
        .map(|c| ratio(cm.tp(c), cm.tp(c) + cm.fp(c)).0)
        .collect()
}

pub fn recall_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.num_classes())
        .map(|c| ratio(cm.tp(c), cm.support(c)).0)
        .collect()
}

pub fn f1_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    precision_per_class(cm)
        .into_iter()
        .zip(recall_per_class(cm))
        .map(|(p, r)| harmonic(p, r))
        .collect()
}

/// Unweighted mean over classes with nonzero support.
pub fn macro_average(values: &[f64], supports: &[u64]) -> f64 {
    let present: Vec<f64> = values
        .iter()
        .zip(supports)
        .filter(|(_, &s)| s > 0)
        .map(|(&v, _)| v)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MicroMetric {
    Precision,
    Recall,
    F1,
}

/// Metric computed from TP/FP/FN pooled over all classes.
pub fn micro_average(cm: &ConfusionMatrix, metric: MicroMetric) -> f64 {
    let k = cm.num_classes();
    let tp: u64 = (0..k).map(|c| cm.tp(c)).sum();
    let fp: u64 = (0..k).map(|c| cm.fp(c)).sum();
    let fn_: u64 = (0..k).map(|c| cm.fn_(c)).sum();
    let p = ratio(tp, tp + fp).0;
    let r = ratio(tp, tp + fn_).0;
    match metric {
        MicroMetric::Precision => p,
        MicroMetric::Recall => r,
        MicroMetric::F1 => harmonic(p, r),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<ClassRow>,
    pub macro_avg: Averages,
    pub micro_avg: Averages,
    pub accuracy: f64,
    pub total: u64,
}

/// Full report; class names default to the lesion classes for 8-class
/// matrices and to `0..k` otherwise.
pub fn report(cm: &ConfusionMatrix) -> ClassificationReport {
    let names: Vec<String> = if cm.num_classes() == NUM_CLASSES {
        ClassLabel::names()
    } else {
        (0..cm.num_classes()).map(|c| c.to_string()).collect()
    };
    report_with_names(cm, &names)
}

pub fn report_with_names(cm: &ConfusionMatrix, names: &[String]) -> ClassificationReport {
    let precision = precision_per_class(cm);
    let recall = recall_per_class(cm);
    let f1 = f1_per_class(cm);
    let supports = cm.supports();
    let classes = (0..cm.num_classes())
        .map(|c| ClassRow {
            class: names[c].clone(),
            precision: precision[c],
            recall: recall[c],
            f1: f1[c],
            support: supports[c],
            precision_undefined: cm.tp(c) + cm.fp(c) == 0,
            recall_undefined: supports[c] == 0,
        })
        .collect();
    ClassificationReport {
        classes,
        macro_avg: Averages {
            precision: macro_average(&precision, &supports),
            recall: macro_average(&recall, &supports),
            f1: macro_average(&f1, &supports),
        },
        micro_avg: Averages {
            precision: micro_average(cm, MicroMetric::Precision),
            recall: micro_average(cm, MicroMetric::Recall),
            f1: micro_average(cm, MicroMetric::F1),
        },
        accuracy: accuracy(cm),
        total: cm.total(),
    }
}

impl ClassificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: per-class rows, then accuracy, macro and micro.
    /// Undefined ratios are marked with `*`.
    pub fn to_text(&self) -> String {
        let width = self.classes.iter().map(|r| r.class.len()).max().unwrap_or(0).max(9);
        let mut out = format!(
            "{:>width$} {:>10} {:>10} {:>10} {:>10}\n\n",
            "", "precision", "recall", "f1-score", "support"
        );
        let cell = |v: f64, undefined: bool| format!("{:.4}{}", v, if undefined { "*" } else { " " });
        for r in &self.classes {
            let _ = writeln!(
                out,
                "{:>width$} {:>10} {:>10} {:>10} {:>10}",
                r.class,
                cell(r.precision, r.precision_undefined),
                cell(r.recall, r.recall_undefined),
                cell(r.f1, r.precision_undefined || r.recall_undefined),
                r.support
            );
        }
        out += "\n";
        let _ = writeln!(
            out,
            "{:>width$} {:>10} {:>10} {:>10.4}  {:>9}",
            "accuracy", "", "", self.accuracy, self.total
        );
        for (name, a) in [("macro avg", &self.macro_avg), ("micro avg", &self.micro_avg)] {
            let _ = writeln!(
                out,
                "{:>width$} {:>10.4}  {:>9.4}  {:>9.4}  {:>9}",
                name, a.precision, a.recall, a.f1, self.total
            );
        }
        if self.classes.iter().any(|r| r.precision_undefined || r.recall_undefined) {
            out += "\n* zero denominator, reported as 0\n";
        }
        out
    }
}

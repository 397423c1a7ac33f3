//! Evaluation metrics: MAE, Pearson correlation, seven-class accuracy,
//! and the two binary-accuracy conventions with F-scores.
//!
//! The neg/non-neg convention binarizes every example at label >= 0; the
//! neg/pos convention drops zero labels and binarizes at > 0. All
//! arithmetic is 64-bit.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricError {
    LengthMismatch { preds: usize, labels: usize },
    Empty,
    /// Neg/pos evaluation after dropping zero labels left nothing.
    NoNonZeroLabels,
    BadClassCount { got: usize, want: usize },
    InvalidClassIndex { index: usize, classes: usize },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LengthMismatch { preds, labels } => {
                write!(f, "prediction count {preds} != label count {labels}")
            }
            Self::Empty => write!(f, "empty evaluation set"),
            Self::NoNonZeroLabels => {
                write!(f, "neg/pos convention: all labels are zero, nothing to evaluate")
            }
            Self::BadClassCount { got, want } => {
                write!(f, "expected {want}-class logits, got {got}")
            }
            Self::InvalidClassIndex { index, classes } => {
                write!(f, "class index {index} outside [0, {classes})")
            }
        }
    }
}

impl std::error::Error for MetricError {}

/// Which binarization rule to apply to continuous scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acc2Convention {
    /// Negative vs non-negative over all examples (label >= 0 is positive).
    NonNeg,
    /// Negative vs positive; zero labels are excluded.
    Pos,
}

/// Accuracy plus weighted and per-class F1 for one binarization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub accuracy: f64,
    /// Support-weighted mean of the two class F1 values.
    pub f1_weighted: f64,
    pub f1_negative: f64,
    pub f1_positive: f64,
    /// Examples actually evaluated (zero labels are dropped under neg/pos).
    pub evaluated: usize,
}

/// Full metric suite for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum MetricBundle {
    Regression {
        mae: f64,
        corr: f64,
        acc7: f64,
        nonneg: BinaryScores,
        pos: BinaryScores,
    },
    Binary {
        acc2: f64,
        evaluated: usize,
    },
}

impl MetricBundle {
    /// Flat key-value lines for the report file.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        match self {
            MetricBundle::Regression { mae, corr, acc7, nonneg, pos } => {
                let mut push = |k: &str, v: f64| out.push_str(&format!("{k} = {v}\n"));
                push("mae", *mae);
                push("corr", *corr);
                push("acc7", *acc7);
                push("acc2_nonneg", nonneg.accuracy);
                push("f1_nonneg", nonneg.f1_weighted);
                push("f1_nonneg_negative", nonneg.f1_negative);
                push("f1_nonneg_positive", nonneg.f1_positive);
                push("acc2_pos", pos.accuracy);
                push("f1_pos", pos.f1_weighted);
                push("f1_pos_negative", pos.f1_negative);
                push("f1_pos_positive", pos.f1_positive);
                out.push_str(&format!("evaluated_pos = {}\n", pos.evaluated));
            }
            MetricBundle::Binary { acc2, evaluated } => {
                out.push_str(&format!("acc2 = {acc2}\n"));
                out.push_str(&format!("evaluated = {evaluated}\n"));
            }
        }
        out
    }
}

/// Mean absolute error and Pearson correlation.
///
/// Zero variance on either side yields correlation 0 with a warning rather
/// than NaN.
pub fn regression_metrics(preds: &[f64], labels: &[f64]) -> Result<(f64, f64), MetricError> {
    check_lengths(preds, labels)?;
    let n = preds.len() as f64;
    let mae = preds.iter().zip(labels).map(|(&p, &y)| (p - y).abs()).sum::<f64>() / n;

    let mean_p = preds.iter().sum::<f64>() / n;
    let mean_y = labels.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_y = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        let dp = p - mean_p;
        let dy = y - mean_y;
        cov += dp * dy;
        var_p += dp * dp;
        var_y += dy * dy;
    }
    let corr = if var_p == 0.0 || var_y == 0.0 {
        log::warn!("pearson correlation undefined for zero-variance input; reporting 0");
        0.0
    } else {
        cov / (var_p.sqrt() * var_y.sqrt())
    };
    Ok((mae, corr))
}

/// Binary accuracy and F-scores over continuous scores under the chosen
/// convention.
pub fn acc2_fscore(
    preds: &[f64],
    labels: &[f64],
    convention: Acc2Convention,
) -> Result<BinaryScores, MetricError> {
    check_lengths(preds, labels)?;
    let pairs: Vec<(bool, bool)> = match convention {
        Acc2Convention::NonNeg => preds
            .iter()
            .zip(labels)
            .map(|(&p, &y)| (p >= 0.0, y >= 0.0))
            .collect(),
        Acc2Convention::Pos => preds
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y != 0.0)
            .map(|(&p, &y)| (p > 0.0, y > 0.0))
            .collect(),
    };
    if pairs.is_empty() {
        return Err(match convention {
            Acc2Convention::Pos => MetricError::NoNonZeroLabels,
            Acc2Convention::NonNeg => MetricError::Empty,
        });
    }
    Ok(binary_scores(&pairs))
}

fn binary_scores(pairs: &[(bool, bool)]) -> BinaryScores {
    let n = pairs.len() as f64;
    let correct = pairs.iter().filter(|(p, y)| p == y).count() as f64;

    // Per-class F1 with the positive class mapped to `true`.
    let f1_for = |class: bool| -> f64 {
        let tp = pairs.iter().filter(|&&(p, y)| p == class && y == class).count() as f64;
        let fp = pairs.iter().filter(|&&(p, y)| p == class && y != class).count() as f64;
        let fneg = pairs.iter().filter(|&&(p, y)| p != class && y == class).count() as f64;
        if 2.0 * tp + fp + fneg == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        }
    };
    let f1_neg = f1_for(false);
    let f1_pos = f1_for(true);
    let support_pos = pairs.iter().filter(|&&(_, y)| y).count() as f64;
    let support_neg = n - support_pos;
    BinaryScores {
        accuracy: correct / n,
        f1_weighted: (support_neg * f1_neg + support_pos * f1_pos) / n,
        f1_negative: f1_neg,
        f1_positive: f1_pos,
        evaluated: pairs.len(),
    }
}

/// Seven-class accuracy over integer sentiment bands.
///
/// Both predictions and labels are clamped to [-3, 3] and rounded half away
/// from zero before exact comparison.
pub fn acc7(preds: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    check_lengths(preds, labels)?;
    let to_class = |x: f64| -> i32 { x.clamp(-3.0, 3.0).round() as i32 };
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| to_class(p) == to_class(y))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Argmax accuracy over two-class logits; ties resolve to class 0.
pub fn binary_accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricError> {
    if logits.len() != labels.len() {
        return Err(MetricError::LengthMismatch { preds: logits.len(), labels: labels.len() });
    }
    if logits.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut correct = 0usize;
    for (row, &y) in logits.iter().zip(labels) {
        if row.len() != 2 {
            return Err(MetricError::BadClassCount { got: row.len(), want: 2 });
        }
        if y >= 2 {
            return Err(MetricError::InvalidClassIndex { index: y, classes: 2 });
        }
        let pred = usize::from(row[1] > row[0]);
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<(), MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Computes the full bundle for a regression task.
pub fn regression_bundle(preds: &[f64], labels: &[f64]) -> Result<MetricBundle, MetricError> {
    let (mae, corr) = regression_metrics(preds, labels)?;
    Ok(MetricBundle::Regression {
        mae,
        corr,
        acc7: acc7(preds, labels)?,
        nonneg: acc2_fscore(preds, labels, Acc2Convention::NonNeg)?,
        pos: acc2_fscore(preds, labels, Acc2Convention::Pos)?,
    })
}

/// Computes the bundle for a binary-classification task.
pub fn binary_bundle(logits: &[Vec<f64>], labels: &[usize]) -> Result<MetricBundle, MetricError> {
    Ok(MetricBundle::Binary {
        acc2: binary_accuracy(logits, labels)?,
        evaluated: labels.len(),
    })
}

//! Classification metrics: accuracy, per-class precision/recall/F1, and
//! macro and support-weighted F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores `predictions` against `labels` over `num_classes` classes.
///
/// A class with zero precision plus recall has F1 0. Macro-F1 averages over
/// the classes that occur in either the labels or the predictions.
pub fn compute(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::Empty { op: "metrics" });
    }
    if labels.len() != predictions.len() {
        return Err(Error::Config(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        for c in [y, p] {
            if c >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: num_classes,
                });
            }
        }
        confusion[y][p] += 1;
    }
    let n = labels.len();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassScores> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let present: Vec<usize> = (0..num_classes)
        .filter(|&c| per_class[c].support > 0 || confusion.iter().any(|row| row[c] > 0))
        .collect();
    let macro_f1 = present.iter().map(|&c| per_class[c].f1).sum::<f64>() / present.len() as f64;
    let weighted_f1 = per_class
        .iter()
        .map(|s| s.f1 * s.support as f64)
        .sum::<f64>()
        / n as f64;
    Ok(MetricsReport {
        n,
        accuracy: ratio(correct, n),
        weighted_f1,
        macro_f1,
        per_class,
        confusion,
    })
}

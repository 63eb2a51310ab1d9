//! Micro-averaged overall precision/recall and F-beta scores for multi-label
//! predictions, in thresholded ("all") and top-3 modes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::LabelVector;
use crate::error::{shape_err, Result, ScidaError};

/// `(1 + b^2) P R / (b^2 P + R)`, or `None` when both inputs are zero.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> Option<f64> {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    (denom > 0.0).then(|| (1.0 + b2) * precision * recall / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Positive where the probability is at or above the threshold.
    All,
    /// The three highest-scoring classes, ties broken by lower index.
    Top3,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub of2: f64,
    pub threshold: Option<f64>,
    /// Set when a ratio had a zero denominator and was reported as 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

/// Indices of the `n` largest scores; ties go to the lower index.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Binary predictions for one row of scores.
pub fn binarize(scores: &[f64], mode: EvalMode, threshold: f64) -> Vec<bool> {
    match mode {
        EvalMode::All => scores.iter().map(|&p| p >= threshold).collect(),
        EvalMode::Top3 => {
            let mut out = vec![false; scores.len()];
            for i in top_n(scores, 3) {
                out[i] = true;
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub predicted: usize,
    pub actual: usize,
}

fn check_inputs(predictions: &Array2<f64>, truths: &[LabelVector]) -> Result<()> {
    if predictions.nrows() != truths.len() {
        return shape_err(format!(
            "{} prediction rows for {} ground-truth vectors",
            predictions.nrows(),
            truths.len()
        ));
    }
    if truths.is_empty() {
        return Err(ScidaError::Empty("evaluation set is empty".into()));
    }
    if let Some(t) = truths.iter().find(|t| t.k() != predictions.ncols()) {
        return shape_err(format!("label width {} vs K = {}", t.k(), predictions.ncols()));
    }
    Ok(())
}

/// Per-class confusion counts.
pub fn class_counts(predictions: &Array2<f64>, truths: &[LabelVector], mode: EvalMode, threshold: f64) -> Result<Vec<Counts>> {
    check_inputs(predictions, truths)?;
    let mut counts = vec![Counts::default(); predictions.ncols()];
    for (row, truth) in predictions.rows().into_iter().zip(truths) {
        let scores = row.to_vec();
        for (k, pred) in binarize(&scores, mode, threshold).into_iter().enumerate() {
            let actual = truth.contains(k);
            let c = &mut counts[k];
            c.predicted += pred as usize;
            c.actual += actual as usize;
            c.tp += (pred && actual) as usize;
        }
    }
    Ok(counts)
}

/// Micro-averaged OP/OR/OF1/OF2. `threshold` is used only in [`EvalMode::All`].
pub fn evaluate(predictions: &Array2<f64>, truths: &[LabelVector], mode: EvalMode, threshold: f64) -> Result<MetricsReport> {
    let counts = class_counts(predictions, truths, mode, threshold)?;
    let tp: usize = counts.iter().map(|c| c.tp).sum();
    let pp: usize = counts.iter().map(|c| c.predicted).sum();
    let ap: usize = counts.iter().map(|c| c.actual).sum();
    if ap == 0 {
        return Err(ScidaError::Empty("evaluation set has no positive ground-truth labels".into()));
    }
    let mut degenerate = pp == 0;
    let op = if pp == 0 { 0.0 } else { tp as f64 / pp as f64 };
    let or = tp as f64 / ap as f64;
    let (of1, of2) = match (f_beta(op, or, 1.0), f_beta(op, or, 2.0)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            degenerate = true;
            (0.0, 0.0)
        }
    };
    Ok(MetricsReport {
        mode,
        op,
        or,
        of1,
        of2,
        threshold: (mode == EvalMode::All).then_some(threshold),
        degenerate,
    })
}

/// Per-class precision/recall averaged over classes with a defined ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroReport {
    pub mode: EvalMode,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
}

pub fn evaluate_macro(predictions: &Array2<f64>, truths: &[LabelVector], mode: EvalMode, threshold: f64) -> Result<MacroReport> {
    let counts = class_counts(predictions, truths, mode, threshold)?;
    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let cp = mean(counts.iter().filter(|c| c.predicted > 0).map(|c| c.tp as f64 / c.predicted as f64).collect());
    let cr = mean(counts.iter().filter(|c| c.actual > 0).map(|c| c.tp as f64 / c.actual as f64).collect());
    Ok(MacroReport {
        mode,
        cp,
        cr,
        cf1: f_beta(cp, cr, 1.0).unwrap_or(0.0),
    })
}

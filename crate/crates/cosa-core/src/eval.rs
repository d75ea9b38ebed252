//! Task metrics, computed in f64.

use crate::{CosaError, Result};
use serde::{Deserialize, Serialize};

/// Conventions with a flagged alternative reading.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MsaMetricOptions {
    /// Count truth == 0 samples as negative instead of excluding them
    /// from Acc2/F1.
    pub include_zeros_as_negative: bool,
    /// Literal ceiling instead of round-to-nearest for Acc7.
    pub ceil_rounding: bool,
}

impl Default for MsaMetricOptions {
    fn default() -> Self {
        Self {
            include_zeros_as_negative: false,
            ceil_rounding: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MsaMetrics {
    pub mae: f64,
    /// Pearson correlation; NaN when either vector has zero variance.
    pub corr: f64,
    pub corr_defined: bool,
    /// Binary accuracy on the non-zero-truth subset, fraction in [0, 1].
    pub acc2: f64,
    /// Binary F1 with "positive" as the positive class.
    pub f1: f64,
    /// 7-class accuracy after rounding and clamping to [-3, 3].
    pub acc7: f64,
    /// Samples participating in Acc2/F1.
    pub acc2_support: usize,
}

/// Sentiment class in `{-3..3}` used by Acc7.
fn seven_class(value: f64, ceil_rounding: bool) -> i64 {
    let rounded = if ceil_rounding { value.ceil() } else { value.round() };
    (rounded as i64).clamp(-3, 3)
}

pub fn metrics_msa(pred: &[f32], truth: &[f32], opts: MsaMetricOptions) -> Result<MsaMetrics> {
    if pred.len() != truth.len() {
        return Err(CosaError::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(CosaError::Config(
            "MSA metrics need at least 2 samples for correlation".into(),
        ));
    }
    let n = pred.len() as f64;
    let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = truth.iter().map(|&v| v as f64).collect();

    let mae = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;

    let mean_p = p.iter().sum::<f64>() / n;
    let mean_t = t.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (a, b) in p.iter().zip(&t) {
        cov += (a - mean_p) * (b - mean_t);
        var_p += (a - mean_p) * (a - mean_p);
        var_t += (b - mean_t) * (b - mean_t);
    }
    let corr_defined = var_p > 0.0 && var_t > 0.0;
    let corr = if corr_defined {
        cov / (var_p.sqrt() * var_t.sqrt())
    } else {
        f64::NAN
    };

    let mut correct2 = 0usize;
    let mut support = 0usize;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (a, b) in p.iter().zip(&t) {
        if *b == 0.0 && !opts.include_zeros_as_negative {
            continue;
        }
        support += 1;
        let pred_pos = *a > 0.0;
        let true_pos = *b > 0.0;
        if pred_pos == true_pos {
            correct2 += 1;
        }
        match (pred_pos, true_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let acc2 = if support > 0 {
        correct2 as f64 / support as f64
    } else {
        0.0
    };
    let f1 = if 2 * tp + fp + fneg > 0 {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    } else {
        0.0
    };

    let acc7 = p
        .iter()
        .zip(&t)
        .filter(|(a, b)| seven_class(**a, opts.ceil_rounding) == seven_class(**b, opts.ceil_rounding))
        .count() as f64
        / n;

    Ok(MsaMetrics {
        mae,
        corr,
        corr_defined,
        acc2,
        f1,
        acc7,
        acc2_support: support,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// One-vs-rest binary accuracy of the argmax prediction.
    pub acc: f64,
    pub f1: f64,
    /// False when the class never occurs in the truth (F1 reported 0).
    pub present: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MerMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub avg_acc: f64,
    pub avg_f1: f64,
}

/// Per-class one-vs-rest accuracy and F1 of argmax predictions, plus
/// unweighted averages.
pub fn metrics_mer(logits: &[f32], truth: &[usize], classes: usize) -> Result<MerMetrics> {
    if classes < 2 {
        return Err(CosaError::Config("MER metrics need >= 2 classes".into()));
    }
    if truth.is_empty() || logits.len() != truth.len() * classes {
        return Err(CosaError::Shape(format!(
            "{} logits vs {} samples x {} classes",
            logits.len(),
            truth.len(),
            classes
        )));
    }
    if truth.iter().any(|&c| c >= classes) {
        return Err(CosaError::Config("MER label out of range".into()));
    }
    let n = truth.len();
    let pred: Vec<usize> = logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();

    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => tn += 1,
            }
        }
        let present = tp + fneg > 0;
        let acc = (tp + tn) as f64 / n as f64;
        let f1 = if present && 2 * tp + fp + fneg > 0 {
            2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            class: c,
            acc,
            f1,
            present,
        });
    }
    let avg_acc = per_class.iter().map(|m| m.acc).sum::<f64>() / classes as f64;
    let avg_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / classes as f64;
    Ok(MerMetrics {
        per_class,
        avg_acc,
        avg_f1,
    })
}

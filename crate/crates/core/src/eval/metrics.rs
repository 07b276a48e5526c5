use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A window's detector score with its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub is_ood_truth: bool,
    pub start_time_step: usize,
    pub end_time_step: usize,
}

impl LabeledScore {
    pub fn new(score: f64, is_ood_truth: bool) -> Self {
        Self {
            score,
            is_ood_truth,
            start_time_step: 0,
            end_time_step: 0,
        }
    }
}

/// Ground truth per window: OOD iff at least half of the forecast steps
/// `[start, end]` fall inside the half-open interval.
pub fn label_windows(windows: &[(usize, usize)], interval: Option<(usize, usize)>) -> Vec<bool> {
    windows
        .iter()
        .map(|&(start, end)| match interval {
            None => false,
            Some((a, b)) => {
                let len = end + 1 - start;
                let lo = start.max(a);
                let hi = (end + 1).min(b);
                let inside = hi.saturating_sub(lo);
                2 * inside >= len
            }
        })
        .collect()
}

fn check(scores: &[LabeledScore]) -> Result<(usize, usize)> {
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {}", s.score)));
    }
    let pos = scores.iter().filter(|s| s.is_ood_truth).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "metric needs both classes, got {pos} OOD and {neg} IND windows"
        )));
    }
    Ok((pos, neg))
}

/// Scores sorted ascending, grouped by equal value: `(value, positives, negatives)`.
fn groups(scores: &[LabeledScore]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&LabeledScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for s in sorted {
        match out.last_mut() {
            Some(g) if g.0 == s.score => {
                if s.is_ood_truth {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => out.push((s.score, s.is_ood_truth as usize, !s.is_ood_truth as usize)),
        }
    }
    out
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counting 1/2.
pub fn auroc(scores: &[LabeledScore]) -> Result<f64> {
    let (pos, neg) = check(scores)?;
    // Count in half-units so everything stays an exact integer.
    let mut negatives_below = 0u128;
    let mut half_wins = 0u128;
    for (_, p, n) in groups(scores) {
        half_wins += p as u128 * (2 * negatives_below + n as u128);
        negatives_below += n as u128;
    }
    Ok(half_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// One operating point for the rule `score > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Operating points at `-inf` and at every distinct score, in increasing
/// threshold order.
pub fn roc_points(scores: &[LabeledScore]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check(scores)?;
    let mut tp = pos;
    let mut fp = neg;
    let point = |threshold, tp: usize, fp: usize| RocPoint {
        threshold,
        fpr: fp as f64 / neg as f64,
        tpr: tp as f64 / pos as f64,
        tp,
        fp,
    };
    let mut out = vec![point(f64::NEG_INFINITY, tp, fp)];
    for (value, p, n) in groups(scores) {
        tp -= p;
        fp -= n;
        out.push(point(value, tp, fp));
    }
    Ok(out)
}

/// True-negative rate at the threshold whose TPR is closest to 95%.
///
/// Thresholds are `-inf` and every distinct score. Ties in `|TPR - 0.95|`
/// go to the higher TPR, then to the higher TNR. Distances are compared
/// exactly as `|20 tp - 19 P|`.
pub fn tnr_at_tpr95(scores: &[LabeledScore]) -> Result<f64> {
    let (pos, _) = check(scores)?;
    let best = roc_points(scores)?
        .into_iter()
        .min_by(|a, b| {
            let da = (20 * a.tp).abs_diff(19 * pos);
            let db = (20 * b.tp).abs_diff(19 * pos);
            da.cmp(&db).then(b.tp.cmp(&a.tp)).then(a.fp.cmp(&b.fp))
        })
        .expect("at least one operating point");
    Ok(1.0 - best.fpr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[bool], truth: &[bool]) -> Result<Self> {
        if predictions.len() != truth.len() {
            return Err(Error::shape(
                format!("{} labels", truth.len()),
                format!("{} predictions", predictions.len()),
            ));
        }
        let mut c = Confusion::default();
        for (&p, &t) in predictions.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

/// `2PR / (P + R)` with F1 = 0 whenever a denominator vanishes.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub f1_ind: f64,
    pub f1_ood: f64,
    pub confusion: Confusion,
}

/// F1 with OOD as the positive class and with IND as the positive class.
pub fn f1_per_class(predictions: &[bool], truth: &[bool]) -> Result<F1Report> {
    let c = Confusion::from_predictions(predictions, truth)?;
    Ok(F1Report {
        f1_ood: f1(c.tp, c.fp, c.fn_),
        f1_ind: f1(c.tn, c.fn_, c.fp),
        confusion: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub tnr_at_tpr95: f64,
    pub f1_ind: f64,
    pub f1_ood: f64,
    pub confusion: Confusion,
}

/// Threshold-free metrics plus F1 at the operating point `score > threshold`.
pub fn metrics_at(scores: &[LabeledScore], threshold: f64) -> Result<MetricsReport> {
    let truth: Vec<bool> = scores.iter().map(|s| s.is_ood_truth).collect();
    let pred: Vec<bool> = scores.iter().map(|s| s.score > threshold).collect();
    let f = f1_per_class(&pred, &truth)?;
    Ok(MetricsReport {
        auroc: auroc(scores)?,
        tnr_at_tpr95: tnr_at_tpr95(scores)?,
        f1_ind: f.f1_ind,
        f1_ood: f.f1_ood,
        confusion: f.confusion,
    })
}
